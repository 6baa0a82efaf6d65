"""End-to-end acceptance suite.

Each test covers one numbered acceptance criterion and prints a single
pass/fail line (visible with pytest -s or in failure reports).
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from radarsr.bev import BevGrid, back_project, load_bev, rasterize, save_bev
from radarsr.cli import main as cli_main
from radarsr.metrics import chamfer, mhd, nn_dists, ucd
from radarsr.pointcloud import PointCloud, RigidTransform, transform
from radarsr.registration import (
    IcpConfig,
    RegistrationResult,
    icp,
    registration_recall,
    rre,
    rte,
    select_pairs,
)
from radarsr.score_model import DenoiserModel, OracleModel
from radarsr.sde import (
    NoiseSchedule,
    enhance,
    euler_forward_path,
    forward_sample,
    marginal,
    true_score,
)
from radarsr.training import TrainConfig, TrainSample, masked_loss, \
    ideal_prev_state, train


def report(num, name, passed, detail=""):
    tag = "PASS" if passed else "FAIL"
    line = f"criterion {num} ({name}): {tag}"
    if detail:
        line += f" [{detail}]"
    print(line)
    assert passed, line


def test_criterion_1_sde_marginal_oracle():
    t0 = time.time()
    sched = NoiseSchedule.constant()
    n_paths, substeps = 10**4, 10
    x0 = np.full(n_paths, 0.9)
    mu = np.full(n_paths, 0.1)
    states = euler_forward_path(x0, mu, sched, substeps,
                                np.random.default_rng(0))
    scale = abs(0.9 - 0.1)
    ok, worst = True, ""
    for t in (25, 50, 100):
        m, v = marginal(np.array(0.9), np.array(0.1), sched, t)
        mean_err = abs(states[t].mean() - float(m)) / scale
        var_err = abs(states[t].var() - v) / v
        if mean_err > 0.02 or var_err > 0.05:
            ok = False
            worst = f"t={t} mean_err={mean_err:.4f} var_err={var_err:.4f}"
    elapsed = time.time() - t0
    report(1, "SDE marginal oracle", ok and elapsed < 30,
           worst or f"{elapsed:.1f}s")


def test_criterion_2_score_identity():
    sched = NoiseSchedule.constant()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, sched.steps + 1))
        x0, mu = rng.random((8, 8)), rng.random((8, 8))
        x_t, eps = forward_sample(x0, mu, sched, t, rng)
        m, v = marginal(x0, mu, sched, t)
        gap = np.max(np.abs(true_score(x_t, m, v) - (-eps / np.sqrt(v))))
        worst = max(worst, gap)
    report(2, "score identity", worst <= 1e-12, f"max gap {worst:.2e}")


def test_criterion_3_oracle_reconstruction():
    t0 = time.time()
    sched = NoiseSchedule.constant(steps=100)
    grid = BevGrid(width=32, height=32)
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(20):
        x0 = rng.random((32, 32))
        mu = rng.random((32, 32))
        from radarsr.bev import BevImage
        out = enhance(BevImage(grid, mu), OracleModel(x0, sched), sched,
                      np.random.default_rng(100 + k))
        rel = np.linalg.norm(out.pixels - x0) / np.linalg.norm(x0)
        worst = max(worst, rel)
    elapsed = time.time() - t0
    report(3, "oracle reconstruction", worst < 0.05 and elapsed < 60,
           f"worst rel L2 {worst:.4f}, {elapsed:.1f}s")


def test_criterion_4_gradient_oracle():
    sched = NoiseSchedule.constant()
    rng = np.random.default_rng(3)
    x0 = rng.random((16, 16)) * (rng.random((16, 16)) < 0.3)
    sample = TrainSample(np.clip(x0 * (rng.random((16, 16)) < 0.5), 0, 1), x0)
    model = DenoiserModel(seed=4)
    cfg = TrainConfig()
    i = 30
    draw = lambda: np.random.default_rng(5)
    res = masked_loss(sample, sched, model, i, draw(), cfg)
    params = model.get_params()
    h = 1e-4
    idx = np.random.default_rng(6).choice(params.size, size=200, replace=False)
    worst = 0.0
    for j in idx:
        vals = []
        for sign in (+1, -1):
            p = params.copy()
            p[j] += sign * h
            model.set_params(p)
            vals.append(masked_loss(sample, sched, model, i, draw(), cfg,
                                    compute_grads=False).loss)
        fd = (vals[0] - vals[1]) / (2 * h)
        denom = max(abs(fd), abs(res.grads[j]), 1e-8)
        worst = max(worst, abs(fd - res.grads[j]) / denom)
    report(4, "gradient oracle", worst < 1e-4, f"worst rel err {worst:.2e}")


def test_criterion_5_posterior_mean_oracle():
    sched = NoiseSchedule.constant(steps=4, theta_bar_total=2.0, lam=0.3)
    x0, mu = 1.0, 0.2
    a = np.exp(-sched.theta_at(1) * sched.dt)
    s = sched.lam * np.sqrt(1 - a**2)
    rng = np.random.default_rng(7)
    n = 10**6
    chains = np.full(n, x0)
    hist = [chains.copy()]
    for _ in range(4):
        chains = mu + (chains - mu) * a + s * rng.standard_normal(n)
        hist.append(chains.copy())
    worst = 0.0
    for i in (2, 3, 4):
        query = mu + (x0 - mu) * np.exp(-sched.theta_bar(i)) + 0.1
        sel = np.abs(hist[i] - query) < 0.01
        mc = hist[i - 1][sel].mean()
        cf = float(ideal_prev_state(np.array(x0), np.array(query),
                                    np.array(mu), sched, i))
        worst = max(worst, abs(mc - cf) / abs(cf))
    report(5, "posterior-mean oracle", worst < 0.01, f"worst {worst:.4f}")


# frozen desk-scale settings shared by criterion 6
_DESK_GRID = BevGrid(width=32, height=32)
_DESK_SPEC = dict(p_keep=0.1, n_ghosts=20, noise_std=0.05,
                  keep_mode="column", column_cell=0.3)


def _desk_pair(seed):
    from radarsr.synth import SceneSpec, generate_scene
    lidar, radar, _ = generate_scene(SceneSpec(seed=seed, **_DESK_SPEC))
    return lidar, radar, rasterize(radar, _DESK_GRID), rasterize(lidar, _DESK_GRID)


def test_criterion_6_desk_scale_training():
    t0 = time.time()
    sched = NoiseSchedule.constant()
    dataset = []
    for k in range(50):
        _, _, mu_img, x0_img = _desk_pair(k)
        dataset.append(TrainSample(mu_img.pixels, x0_img.pixels))
    held_out = [_desk_pair(1000 + k) for k in range(10)]

    def run_training(blank_weight):
        cfg = TrainConfig(iterations=1000, batch_size=8, seed=1,
                          learning_rate=0.2, blank_weight=blank_weight)
        return train(dataset, cfg, sched)

    model_w2, trace = run_training(2.0)
    losses = [r[1] for r in trace]
    early, late = np.mean(losses[:50]), np.mean(losses[-50:])
    decrease_ok = late <= 0.7 * early

    def evaluate(model):
        ucds, fprs = [], []
        for k, (lidar, radar, mu_img, x0_img) in enumerate(held_out):
            out = enhance(mu_img, model, sched, np.random.default_rng(500 + k))
            ucds.append(ucd(lidar, back_project(out), dims=2))
            blank = x0_img.pixels == 0
            fprs.append(float((out.pixels[blank] > 1.0 / 255.0).mean()))
        return float(np.mean(ucds)), float(np.mean(fprs))

    ucd_enh, fpr_w2 = evaluate(model_w2)
    ucd_raw = float(np.mean([ucd(lidar, radar, dims=2)
                             for lidar, radar, _, _ in held_out]))
    ucd_ok = ucd_enh < ucd_raw

    model_w0, _ = run_training(0.0)
    _, fpr_w0 = evaluate(model_w0)
    fpr_ok = fpr_w2 < fpr_w0

    elapsed = time.time() - t0
    report(6, "desk-scale training",
           decrease_ok and ucd_ok and fpr_ok and elapsed < 1200,
           f"(a) loss {early:.3f}->{late:.3f}, "
           f"(b) UCD enh {ucd_enh:.3f} vs raw {ucd_raw:.3f}, "
           f"(c) FPR w=2 {fpr_w2:.3f} vs w=0 {fpr_w0:.3f}, {elapsed:.0f}s")


def test_criterion_7_metrics_exactness():
    exact = True
    for k in range(100):
        a = PointCloud(np.random.default_rng(2000 + k).uniform(-10, 10, (500, 3)))
        b = PointCloud(np.random.default_rng(3000 + k).uniform(-10, 10, (500, 3)))
        for dims in (2, 3):
            if not np.array_equal(nn_dists(a, b, dims, "kdtree"),
                                  nn_dists(a, b, dims, "brute")):
                exact = False
    pc = lambda *pts: PointCloud([[x, y, 0.0] for x, y in pts])
    hand = (
        chamfer(pc((0, 0)), pc((1, 0)), dims=2) == 1.0
        and mhd(pc((0, 0)), pc((1, 0), (10, 0)), dims=2) == 3.25
        and ucd(pc((0, 0)), pc((2, 0)), dims=2) == 2.0
        and nn_dists(pc((0, 0)), pc((3, 4)), dims=2)[0] == 5.0
    )
    report(7, "metrics exactness", exact and hand)


def test_criterion_8_registration():
    # (i) noiseless transform recovery
    rng = np.random.default_rng(8)
    cloud = PointCloud(rng.uniform([-4, -4, 0], [4, 4, 2], (1500, 3)))
    cfg = IcpConfig(voxel_size=0.0, gate=np.inf, gate_decay=1.0, gate_floor=0.0)
    recover_ok = True
    for yaw, t in [(3.0, (0.2, 0.1, 0.0)), (-5.0, (0.0, 0.3, 0.05)),
                   (4.5, (-0.3, 0.2, 0.0)), (1.0, (0.1, -0.1, 0.1))]:
        T = RigidTransform.from_yaw_deg(yaw, t)
        est = icp(cloud, transform(cloud, T), cfg=cfg).transform
        if rte(est, T) >= 0.01 or rre(est, T) >= 0.1:
            recover_ok = False

    # (ii) recall vs a recount oracle at the 0.5 m / 5 deg thresholds
    rng = np.random.default_rng(9)
    results = [RegistrationResult.evaluate(
        RigidTransform.from_yaw_deg(rng.uniform(0, 10), (rng.uniform(0, 1), 0, 0)),
        RigidTransform.identity()) for _ in range(40)]
    summary = registration_recall(results, rte_thresh=0.5, rre_thresh=5.0)
    manual = sum(1 for r in results if r.rte < 0.5 and r.rre < 5.0)
    recount_ok = summary.n_success == manual and summary.recall == manual / 40

    # (iii) enhanced vs raw comparative run on a 10-frame trajectory
    from radarsr.synth import SceneSpec, generate_trajectory
    spec = SceneSpec(seed=22, **_DESK_SPEC)
    frames = generate_trajectory(spec, 10, 0.6)
    grid = BevGrid(width=128, height=128)
    sched = NoiseSchedule.constant()
    poses = [pose for _, _, pose in frames]
    raw_clouds = [radar for _, radar, _ in frames]
    enh_clouds = []
    for k, (lidar, radar, _) in enumerate(frames):
        out = enhance(rasterize(radar, grid),
                      OracleModel(rasterize(lidar, grid).pixels, sched),
                      sched, np.random.default_rng(700 + k))
        enh_clouds.append(back_project(out))
    pairs = select_pairs(poses, max_distance=3.0)
    icp_cfg = IcpConfig(gate=2.0)

    def recall_of(clouds):
        results = []
        for i, j in pairs:
            gt = poses[j].inverse().compose(poses[i])
            try:
                est = icp(clouds[i], clouds[j], cfg=icp_cfg).transform
            except Exception:
                results.append(RegistrationResult.failed(gt))
                continue
            results.append(RegistrationResult.evaluate(est, gt))
        return registration_recall(results).recall

    rr_raw, rr_enh = recall_of(raw_clouds), recall_of(enh_clouds)
    report(8, "registration", recover_ok and recount_ok and rr_enh >= rr_raw,
           f"RR enh {rr_enh:.2f} vs raw {rr_raw:.2f}")


def test_criterion_9_bev_bit_exactness(tmp_path):
    # hand rasterize case: one point per cell, exact gray values
    grid = BevGrid(width=4, height=4, x_range=(-2, 2), y_range=(0, 4),
                   z_range=(0, 1), gamma=0.0)
    img = rasterize(PointCloud([[-1.9, 3.9, 0.5], [1.9, 0.1, 1.0],
                                [2.0, 4.0, 0.25]]), grid)
    hand_ok = (
        img.pixels[0, 0] == 0.5           # top-left cell
        and img.pixels[3, 3] == 1.0       # bottom-right cell
        and img.pixels[0, 3] == 0.25      # max boundary clamped inward
        and img.pixels.sum() == 1.75      # everything else empty
    )

    # PGM / PNG round trips are lossless on 8-bit data
    from radarsr.bev import BevImage
    rng = np.random.default_rng(10)
    px = rng.integers(0, 256, (32, 32)).astype(np.float64) / 255.0
    src = BevImage(BevGrid(width=32, height=32), px)
    round_ok = True
    for ext in ("pgm", "png"):
        p = tmp_path / f"img.{ext}"
        save_bev(src, p)
        back = load_bev(p, src.grid)
        if not np.array_equal(back.pixels, src.pixels):
            round_ok = False

    # rasterize -> back_project 2D Chamfer within half the cell diagonal
    from radarsr.synth import SceneSpec, generate_scene
    lidar, _, _ = generate_scene(SceneSpec(seed=11, p_keep=1.0, noise_std=0.0,
                                           n_ghosts=0))
    default_grid = BevGrid()
    above = lidar.select(lidar.xyz[:, 2] > default_grid.gamma + 0.1)
    cd = chamfer(above, back_project(rasterize(above, default_grid)), dims=2)
    half_diag = 0.5 * np.hypot(default_grid.cell_x, default_grid.cell_y)
    report(9, "BEV bit-exactness", hand_ok and round_ok and cd <= half_diag,
           f"round-trip CD {cd:.4f} <= {half_diag:.4f}")


_CLI_CFG = """
[grid]
width = 32
height = 32
[schedule]
steps = 10
[train]
iterations = 5
batch_size = 2
[synth]
p_keep = 0.2
keep_mode = column
n_ghosts = 10
noise_std = 0.05
lattice = 0.15
"""


def test_criterion_10_cli_determinism(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "cfg.ini"
    cfg.write_text(_CLI_CFG)

    def digest(d):
        h = hashlib.sha256()
        for p in sorted(Path(d).rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    def invoke(args):
        r = runner.invoke(cli_main, args, catch_exceptions=False)
        assert r.exit_code == 0, r.output

    all_ok = True
    details = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        invoke(["synth", "--config", str(cfg), "--seed", "9",
                "--out", str(d / "scenes"), "--scenes", "2"])
        invoke(["synth", "--config", str(cfg), "--seed", "9", "--trajectory",
                "--frames", "4", "--step", "0.6", "--out", str(d / "traj")])
        invoke(["preprocess",
                *(str(d / "scenes" / f"radar_{k:03d}.txt") for k in range(2)),
                "--config", str(cfg), "--kind", "radar", "--aggregate", "1",
                "--seed", "9", "--out", str(d / "mu")])
        invoke(["preprocess",
                *(str(d / "scenes" / f"lidar_{k:03d}.txt") for k in range(2)),
                "--config", str(cfg), "--kind", "lidar", "--aggregate", "1",
                "--seed", "9", "--out", str(d / "x0")])
        invoke(["train", "--config", str(cfg), "--seed", "9",
                "--mu-dir", str(d / "mu"), "--x0-dir", str(d / "x0"),
                "--out", str(d / "run")])
        invoke(["enhance", "--config", str(cfg), "--seed", "9",
                "--input", str(d / "mu"),
                "--checkpoint", str(d / "run" / "model.ckpt"),
                "--out", str(d / "enh")])
        (d / "ref").mkdir()
        (d / "cand").mkdir()
        for k in range(2):
            name = f"scene_{k:03d}.txt"
            (d / "ref" / name).write_bytes(
                (d / "scenes" / f"lidar_{k:03d}.txt").read_bytes())
            (d / "cand" / name).write_bytes(
                (d / "scenes" / f"radar_{k:03d}.txt").read_bytes())
        invoke(["eval", "--config", str(cfg), "--reference", str(d / "ref"),
                "--candidate", str(d / "cand"),
                "--out", str(d / "metrics.csv")])
        invoke(["register", "--config", str(cfg), "--clouds", str(d / "traj"),
                "--poses", str(d / "traj" / "poses.txt"),
                "--pattern", "lidar_*.txt", "--out", str(d / "reg.csv")])
    for sub in ("scenes", "traj", "mu", "x0", "run", "enh"):
        same = digest(tmp_path / "a" / sub) == digest(tmp_path / "b" / sub)
        all_ok &= same
        if not same:
            details.append(sub)
    for f in ("metrics.csv", "reg.csv"):
        same = (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        all_ok &= same
        if not same:
            details.append(f)
    report(10, "CLI determinism", all_ok,
           "mismatch: " + ", ".join(details) if details else "byte-identical")
