"""Command-line pipeline: synth -> preprocess -> train -> enhance -> eval -> register.

Every command is deterministic given --config and --seed; configuration is a
plain INI file whose values can be left out (defaults match the library).
Exit codes: 0 success, 1 validation failure, 2 runtime failure, 3 training
divergence.
"""

from __future__ import annotations

import configparser
import functools
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .bev import (
    BevGrid,
    back_project,
    load_bev,
    load_grid_sidecar,
    rasterize,
    save_bev,
    save_grid_sidecar,
)
from .errors import (
    ConfigError,
    DegenerateGeometry,
    RadarSrError,
    TrainingDiverged,
)
from .metrics import MetricReport, format_reports, save_reports
from .pointcloud import (
    GroundCfg,
    aggregate,
    filter_fov,
    load_cloud,
    load_poses,
    remove_ground,
    save_cloud_text,
    save_poses,
)
from .registration import (
    IcpConfig,
    RegistrationResult,
    format_recall,
    icp,
    registration_recall,
    save_pair_results,
    select_pairs,
)
from .score_model import DenoiserModel, OracleModel
from .sde import NoiseSchedule, enhance as run_enhance
from .synth import SceneSpec, generate_scene, generate_trajectory
from .training import TrainConfig, TrainSample, save_trace, train


# ---------------------------------------------------------------------------
# configuration plumbing

_SECTIONS = ("grid", "schedule", "train", "synth", "preprocess", "enhance",
             "metrics", "register")


def _load_config(path):
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
    for s in _SECTIONS:
        if not cp.has_section(s):
            cp.add_section(s)
    return cp


def _grid_from(cp) -> BevGrid:
    g = cp["grid"]
    return BevGrid(
        width=g.getint("width", 256),
        height=g.getint("height", 256),
        x_range=(g.getfloat("x_min", -15.0), g.getfloat("x_max", 15.0)),
        y_range=(g.getfloat("y_min", 0.0), g.getfloat("y_max", 30.0)),
        z_range=(g.getfloat("z_min", -0.8), g.getfloat("z_max", 1.7)),
        gamma=g.getfloat("gamma", fallback=None),
    )


def _schedule_from(cp) -> NoiseSchedule:
    s = cp["schedule"]
    kind = s.get("kind", "constant")
    args = dict(
        steps=s.getint("steps", 100),
        theta_bar_total=s.getfloat("theta_bar_total", 5.3),
        lam=s.getfloat("lambda", 50.0 / 255.0),
        dt=s.getfloat("dt", 1.0),
    )
    if kind == "constant":
        return NoiseSchedule.constant(**args)
    if kind == "cosine":
        return NoiseSchedule.cosine(**args)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _train_cfg_from(cp, seed) -> TrainConfig:
    t = cp["train"]
    return TrainConfig(
        blank_weight=t.getfloat("blank_weight", 2.0),
        batch_size=t.getint("batch_size", 8),
        iterations=t.getint("iterations", 1000),
        learning_rate=t.getfloat("learning_rate", 0.2),
        momentum=t.getfloat("momentum", 0.9),
        seed=seed,
    )


def _scene_spec_from(cp, seed, grid: BevGrid) -> SceneSpec:
    s = cp["synth"]
    return SceneSpec(
        seed=seed,
        x_range=grid.x_range,
        y_range=grid.y_range,
        z_range=grid.z_range,
        n_boxes=s.getint("n_boxes", 4),
        n_walls=s.getint("n_walls", 2),
        n_cylinders=s.getint("n_cylinders", 2),
        p_keep=s.getfloat("p_keep", 0.1),
        n_ghosts=s.getint("n_ghosts", 30),
        noise_std=s.getfloat("noise_std", 0.02),
        lattice=s.getfloat("lattice", 0.05),
        include_ground=s.getboolean("include_ground", False),
        keep_mode=s.get("keep_mode", "point"),
        column_cell=s.getfloat("column_cell", 0.3),
    )


def _icp_cfg_from(cp) -> IcpConfig:
    r = cp["register"]
    return IcpConfig(
        max_iters=r.getint("max_iters", 50),
        tol=r.getfloat("tol", 1e-8),
        voxel_size=r.getfloat("voxel_size", 0.2),
        gate=r.getfloat("gate", 1.0),
        gate_decay=r.getfloat("gate_decay", 0.9),
        gate_floor=r.getfloat("gate_floor", 0.2),
    )


def _guarded(fn):
    """Map exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except TrainingDiverged as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except (ConfigError, ValueError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except (RadarSrError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)

    return wrapper


def _pmap(fn, items, jobs):
    """Order-preserving map over independent items, optionally threaded."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _require_files(paths):
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")


def _listed(directory, suffixes):
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"input directory not found: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix in suffixes)
    if not files:
        raise ConfigError(f"no {'/'.join(suffixes)} files in {directory}")
    return files


def _save_layout(layout, path):
    with open(path, "w") as f:
        f.write(f"boxes = {len(layout['boxes'])}\n")
        for i, (center, size) in enumerate(layout["boxes"]):
            f.write(f"box{i}_center = " + " ".join(f"{v:.17g}" for v in center) + "\n")
            f.write(f"box{i}_size = " + " ".join(f"{v:.17g}" for v in size) + "\n")
        f.write(f"walls = {len(layout['walls'])}\n")
        for i, (start, end) in enumerate(layout["walls"]):
            f.write(f"wall{i}_start = " + " ".join(f"{v:.17g}" for v in start) + "\n")
            f.write(f"wall{i}_end = " + " ".join(f"{v:.17g}" for v in end) + "\n")
        f.write(f"cylinders = {len(layout['cylinders'])}\n")
        for i, (center, radius) in enumerate(layout["cylinders"]):
            f.write(f"cyl{i}_center = " + " ".join(f"{v:.17g}" for v in center) + "\n")
            f.write(f"cyl{i}_radius = {radius:.17g}\n")


# ---------------------------------------------------------------------------
# commands

@click.group()
def main():
    """Radar-to-LiDAR point cloud super-resolution pipeline."""


_common = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="INI configuration file."),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--jobs", type=int, default=1, show_default=True,
                 help="Parallel workers for independent files."),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@main.command()
@_with_common
@click.option("--out", required=True, type=click.Path())
@click.option("--scenes", type=int, default=1, show_default=True,
              help="Number of independent paired scenes.")
@click.option("--trajectory", is_flag=True,
              help="Generate one moving-sensor sequence instead of scenes.")
@click.option("--frames", type=int, default=10, show_default=True)
@click.option("--step", type=float, default=0.5, show_default=True,
              help="Per-frame forward motion in meters (trajectory mode).")
@_guarded
def synth(config_path, seed, jobs, out, scenes, trajectory, frames, step):
    """Generate synthetic paired LiDAR/radar clouds (plus layout or poses)."""
    cp = _load_config(config_path)
    grid = _grid_from(cp)
    if trajectory:
        spec = _scene_spec_from(cp, seed, grid)
        frame_data = generate_trajectory(spec, frames, step)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, (lidar, radar, _) in enumerate(frame_data):
            save_cloud_text(lidar, out_dir / f"lidar_{k:03d}.txt")
            save_cloud_text(radar, out_dir / f"radar_{k:03d}.txt")
        save_poses([pose for _, _, pose in frame_data], out_dir / "poses.txt")
        click.echo(f"wrote {frames} frames to {out_dir}")
        return
    specs = [_scene_spec_from(cp, seed + k, grid) for k in range(scenes)]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(item):
        k, spec = item
        lidar, radar, layout = generate_scene(spec)
        save_cloud_text(lidar, out_dir / f"lidar_{k:03d}.txt")
        save_cloud_text(radar, out_dir / f"radar_{k:03d}.txt")
        _save_layout(layout, out_dir / f"layout_{k:03d}.txt")

    _pmap(one, enumerate(specs), jobs)
    click.echo(f"wrote {scenes} scene(s) to {out_dir}")


@main.command()
@_with_common
@click.argument("inputs", nargs=-1, required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["lidar", "radar"]), required=True)
@click.option("--poses", "poses_path", type=click.Path(), default=None,
              help="Pose file; required when aggregating over frames.")
@click.option("--aggregate", "agg", type=int, default=None,
              help="Frames merged per output (default: 5 radar, 1 lidar).")
@_guarded
def preprocess(config_path, seed, jobs, inputs, out, kind, poses_path, agg):
    """Clean clouds (ground / FOV), aggregate frames, and rasterize to BEV."""
    cp = _load_config(config_path)
    grid = _grid_from(cp)
    pre = cp["preprocess"]
    fov = (pre.getfloat("fov_min", 30.0), pre.getfloat("fov_max", 150.0))
    ground_cfg = GroundCfg(
        inlier_threshold=pre.getfloat("ground_inlier", 0.1),
        height_margin=pre.getfloat("ground_margin", 0.2),
        on_failure=pre.get("ground_on_failure", "passthrough"),
        seed=seed,
    )
    if agg is None:
        agg = pre.getint("aggregate", 5 if kind == "radar" else 1)
    if agg < 1:
        raise ConfigError("--aggregate must be >= 1")
    _require_files(inputs)
    poses = None
    if agg > 1:
        if poses_path is None:
            raise ConfigError("aggregation over frames requires --poses")
        _require_files([poses_path])
        poses = load_poses(poses_path)
        if len(poses) != len(inputs):
            raise ConfigError(
                f"pose count {len(poses)} does not match {len(inputs)} inputs")
    clouds = [load_cloud(p) for p in inputs]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_grid_sidecar(grid, out_dir / "grid.txt")

    def one(k):
        cloud = clouds[k]
        if kind == "lidar" and len(cloud):
            cloud = remove_ground(cloud, ground_cfg)
        cloud = filter_fov(cloud, fov[0], fov[1])
        if agg > 1:
            lo = max(0, k - agg + 1)
            into_k = poses[k].inverse()
            window = []
            for j in range(lo, k + 1):
                cj = clouds[j]
                if kind == "lidar" and len(cj):
                    cj = remove_ground(cj, ground_cfg)
                cj = filter_fov(cj, fov[0], fov[1])
                window.append((cj, into_k.compose(poses[j])))
            cloud = aggregate(window)
        img = rasterize(cloud, grid)
        save_bev(img, out_dir / f"bev_{k:03d}.pgm")

    _pmap(one, range(len(clouds)), jobs)
    click.echo(f"wrote {len(clouds)} BEV image(s) to {out_dir}")


@main.command(name="train")
@_with_common
@click.option("--mu-dir", required=True, type=click.Path(),
              help="Degraded-input BEV images.")
@click.option("--x0-dir", required=True, type=click.Path(),
              help="Clean-target BEV images, matched by file name.")
@click.option("--out", required=True, type=click.Path())
@_guarded
def train_cmd(config_path, seed, jobs, mu_dir, x0_dir, out):
    """Train the denoiser on paired BEV images; writes checkpoint + trace."""
    cp = _load_config(config_path)
    sched = _schedule_from(cp)
    cfg = _train_cfg_from(cp, seed)
    mu_files = _listed(mu_dir, {".pgm", ".png"})
    x0_by_name = {p.name: p for p in _listed(x0_dir, {".pgm", ".png"})}
    pairs = [(m, x0_by_name[m.name]) for m in mu_files if m.name in x0_by_name]
    if not pairs:
        raise ConfigError(f"no file-name matches between {mu_dir} and {x0_dir}")
    dataset = [
        TrainSample(load_bev(m).pixels, load_bev(x).pixels) for m, x in pairs
    ]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, trace = train(dataset, cfg, sched)
    model.save(out_dir / "model.ckpt")
    sched.save(out_dir / "schedule.txt")
    save_trace(trace, out_dir / "trace.csv")
    click.echo(f"trained on {len(dataset)} pair(s); final loss "
               f"{trace[-1][1]:.6f}; checkpoint in {out_dir}")


@main.command(name="enhance")
@_with_common
@click.option("--input", "input_dir", required=True, type=click.Path(),
              help="Degraded BEV images to enhance.")
@click.option("--out", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--oracle-clean", type=click.Path(), default=None,
              help="Clean BEV dir: use the analytic noise oracle instead of "
                   "a checkpoint (verification runs).")
@click.option("--schedule", "schedule_path", type=click.Path(), default=None,
              help="Schedule file (default: the one beside the checkpoint, "
                   "else the config).")
@_guarded
def enhance_cmd(config_path, seed, jobs, input_dir, out, checkpoint,
                oracle_clean, schedule_path):
    """Run the reverse diffusion chain over BEV images; writes images + clouds."""
    cp = _load_config(config_path)
    if (checkpoint is None) == (oracle_clean is None):
        raise ConfigError("pass exactly one of --checkpoint / --oracle-clean")
    if schedule_path is None and checkpoint is not None:
        beside = Path(checkpoint).parent / "schedule.txt"
        if beside.is_file():
            schedule_path = beside
    if schedule_path is not None:
        _require_files([schedule_path])
        sched = NoiseSchedule.load(schedule_path)
    else:
        sched = _schedule_from(cp)
    stochastic = cp["enhance"].getboolean("stochastic", True)
    files = _listed(input_dir, {".pgm", ".png"})
    sidecar = Path(input_dir) / "grid.txt"
    grid = load_grid_sidecar(sidecar) if sidecar.is_file() else _grid_from(cp)
    model = None
    clean_by_name = {}
    if checkpoint is not None:
        _require_files([checkpoint])
        model = DenoiserModel.load(checkpoint)
    else:
        clean_by_name = {p.name: p for p in _listed(oracle_clean, {".pgm", ".png"})}
        missing = [f.name for f in files if f.name not in clean_by_name]
        if missing:
            raise ConfigError(f"no clean counterpart for: {', '.join(missing)}")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_grid_sidecar(grid, out_dir / "grid.txt")

    def one(item):
        k, path = item
        img = load_bev(path, grid)
        m = model or OracleModel(load_bev(clean_by_name[path.name], grid).pixels,
                                 sched)
        rng = np.random.default_rng(seed + k)
        result = run_enhance(img, m, sched, rng, stochastic=stochastic)
        save_bev(result, out_dir / path.name)
        save_cloud_text(back_project(result), out_dir / (path.stem + ".txt"))

    _pmap(one, enumerate(files), jobs)
    click.echo(f"enhanced {len(files)} image(s) into {out_dir}")


@main.command(name="eval")
@_with_common
@click.option("--reference", required=True, type=click.Path(),
              help="Ground-truth cloud files (directory).")
@click.option("--candidate", required=True, type=click.Path(),
              help="Cloud files to score, matched to reference by name.")
@click.option("--out", required=True, type=click.Path(),
              help="Metric CSV to write.")
@click.option("--dims", type=click.Choice(["2", "3"]), default=None)
@_guarded
def eval_cmd(config_path, seed, jobs, reference, candidate, out, dims):
    """Score candidate clouds against references (CD / MHD / UCD / UMHD)."""
    cp = _load_config(config_path)
    if dims is None:
        dims = cp["metrics"].getint("dims", 2)
    dims = int(dims)
    refs = _listed(reference, {".txt", ".bin"})
    cand_by_name = {p.name: p for p in _listed(candidate, {".txt", ".bin"})}
    pairs = [(r, cand_by_name[r.name]) for r in refs if r.name in cand_by_name]
    if not pairs:
        raise ConfigError(f"no file-name matches between {reference} and {candidate}")

    def one(item):
        ref_path, cand_path = item
        ref, cand = load_cloud(ref_path), load_cloud(cand_path)
        try:
            return MetricReport.compute(ref, cand, dims=dims,
                                        label=ref_path.stem)
        except RadarSrError as e:
            raise RadarSrError(f"{cand_path.name}: {e}") from e

    reports = _pmap(one, pairs, jobs)
    save_reports(reports, out)
    click.echo(format_reports(reports))


@main.command(name="register")
@_with_common
@click.option("--clouds", "clouds_dir", required=True, type=click.Path())
@click.option("--poses", "poses_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Per-pair result CSV to write.")
@click.option("--label", default="clouds", show_default=True)
@click.option("--pattern", default="*", show_default=True,
              help="Glob selecting the cloud files inside --clouds.")
@_guarded
def register_cmd(config_path, seed, jobs, clouds_dir, poses_path, out, label,
                 pattern):
    """ICP-register frame pairs along a trajectory and report recall."""
    cp = _load_config(config_path)
    reg = cp["register"]
    icp_cfg = _icp_cfg_from(cp)
    rte_thresh = reg.getfloat("rte_thresh", 0.5)
    rre_thresh = reg.getfloat("rre_thresh", 5.0)
    d = Path(clouds_dir)
    if not d.is_dir():
        raise ConfigError(f"input directory not found: {clouds_dir}")
    files = sorted(p for p in d.glob(pattern) if p.suffix in {".txt", ".bin"})
    if not files:
        raise ConfigError(f"no cloud files matching {pattern!r} in {clouds_dir}")
    _require_files([poses_path])
    poses = load_poses(poses_path)
    if len(poses) != len(files):
        raise ConfigError(
            f"pose count {len(poses)} does not match {len(files)} clouds")
    pairs = select_pairs(poses,
                         min_distance=reg.getfloat("min_pair_distance", 1.0),
                         max_distance=reg.getfloat("max_pair_distance", 10.0))
    if not pairs:
        raise ConfigError("no frame pairs in the configured distance band")
    clouds = [load_cloud(p) for p in files]

    def one(pair):
        i, j = pair
        gt = poses[j].inverse().compose(poses[i])
        try:
            est = icp(clouds[i], clouds[j], cfg=icp_cfg).transform
        except DegenerateGeometry:
            return RegistrationResult.failed(gt)
        return RegistrationResult.evaluate(est, gt, rte_thresh, rre_thresh)

    results = _pmap(one, pairs, jobs)
    summary = registration_recall(results, rte_thresh, rre_thresh)
    save_pair_results(pairs, results, out)
    click.echo(format_recall([(label, summary)]))


if __name__ == "__main__":
    main()
