"""Masked residual training objective and the desk-scale training loop.

The objective penalizes the gap between the one-step reversed state (using
the network's predicted noise) and the ideal previous state (the posterior
mean of the forward chain), split into occupied and blank regions:

    J = gamma_i * (J_target + w * J_blank)

with each region term normalized by its own pixel count to counter the
heavy occupied/blank imbalance of BEV images.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .bev import BevImage, mask_of
from .errors import TrainingDiverged
from .score_model import DenoiserModel
from .sde import NoiseSchedule, forward_sample, marginal


@dataclass(frozen=True)
class TrainConfig:
    blank_weight: float = 2.0          # w in the split objective
    step_weights: np.ndarray | None = None  # gamma_i, default all ones
    batch_size: int = 8
    iterations: int = 1000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.blank_weight < 0:
            raise ValueError("blank_weight must be >= 0")
        if self.step_weights is not None:
            w = np.asarray(self.step_weights, dtype=np.float64)
            if np.any(w <= 0):
                raise ValueError("step_weights must be positive")
            object.__setattr__(self, "step_weights", w)

    def gamma(self, i):
        if self.step_weights is None:
            return 1.0
        return float(self.step_weights[i - 1])


@dataclass(frozen=True)
class TrainSample:
    """A paired (degraded, clean) BEV example with masks from the clean image."""

    mu: np.ndarray
    x0: np.ndarray
    mask: np.ndarray = field(init=False)
    mask_blank: np.ndarray = field(init=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        x0 = np.asarray(self.x0, dtype=np.float64)
        if mu.shape != x0.shape:
            raise ValueError(f"shape mismatch: {mu.shape} vs {x0.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "x0", x0)
        m = (x0 > 0).astype(np.float64)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "mask_blank", 1.0 - m)

    @classmethod
    def from_images(cls, mu: BevImage, x0: BevImage):
        return cls(mu.pixels, x0.pixels)


def ideal_prev_state(x0, x_i, mu, sched: NoiseSchedule, i):
    """Posterior mean of x(i-1) given x(i) and x(0) for the discrete OU chain.

    Linear-Gaussian conditioning of the exact one-step transition
    x(i) | x(i-1) ~ N(mu + a (x(i-1) - mu), lam^2 (1 - a^2)), a = exp(-theta_i dt),
    against the marginal at i-1:
        E[x(i-1) | x(i), x(0)] = m_{i-1} + a v_{i-1} / v_i * (x(i) - m_i).
    """
    if not 1 <= i <= sched.steps:
        raise ValueError(f"step index {i} outside [1, {sched.steps}]")
    x0 = np.asarray(x0, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    m_prev, v_prev = marginal(x0, mu, sched, i - 1)
    m_i, v_i = marginal(x0, mu, sched, i)
    a = np.exp(-sched.theta_at(i) * sched.dt)
    return m_prev + (a * v_prev / v_i) * (x_i - m_i)


def reversed_prev_state(x_i, mu, sched: NoiseSchedule, i, eps_hat):
    """Deterministic reverse step using score = -eps_hat / sqrt(v_i).

    Affine in eps_hat; shared by the loss (torch) and evaluation (numpy).
    """
    theta = sched.theta_at(i)
    sigma2 = 2.0 * sched.lam**2 * theta
    coeff = sigma2 / np.sqrt(sched.var(i))
    drift = theta * (mu - x_i) + coeff * eps_hat
    return x_i - drift * sched.dt


@dataclass(frozen=True)
class LossResult:
    loss: float
    grads: np.ndarray | None
    j_target: float
    j_blank: float


def masked_loss(sample: TrainSample, sched: NoiseSchedule, model: DenoiserModel,
                i, rng, cfg: TrainConfig, compute_grads=True) -> LossResult:
    """Single-timestep masked residual loss for one sample, with gradients.

    Draws x(i) from the closed-form forward marginal, reverses it one step
    with the model's predicted noise, and penalizes the L1 gap to the
    posterior-mean target per region.
    """
    x_i, _ = forward_sample(sample.x0, sample.mu, sched, i, rng)
    ideal = ideal_prev_state(sample.x0, x_i, sample.mu, sched, i)

    model.net.zero_grad()
    x_i_t = torch.from_numpy(x_i[None])
    mu_t = torch.from_numpy(sample.mu[None])
    eps_hat = model.forward_torch(x_i_t, mu_t, i)[0]
    reversed_t = reversed_prev_state(x_i_t[0], mu_t[0], sched, i, eps_hat)
    r = torch.abs(reversed_t - torch.from_numpy(ideal))

    m = torch.from_numpy(sample.mask)
    mb = torch.from_numpy(sample.mask_blank)
    n_m, n_mb = sample.mask.sum(), sample.mask_blank.sum()
    j_target = (m * r).sum() / n_m if n_m > 0 else torch.zeros((), dtype=torch.float64)
    j_blank = (mb * r).sum() / n_mb if n_mb > 0 else torch.zeros((), dtype=torch.float64)
    loss = cfg.gamma(i) * (j_target + cfg.blank_weight * j_blank)

    grads = None
    if compute_grads:
        loss.backward()
        grads = np.concatenate([
            (p.grad.detach().numpy().ravel() if p.grad is not None
             else np.zeros(p.numel()))
            for p in model.net.parameters()
        ])
    return LossResult(float(loss.detach()), grads,
                      float(j_target.detach()), float(j_blank.detach()))


def train(dataset, cfg: TrainConfig, sched: NoiseSchedule,
          model: DenoiserModel | None = None):
    """SGD-with-momentum training loop; returns (model, trace).

    trace is a list of (iteration, loss, j_target, j_blank) rows averaged
    over the batch. Fully deterministic given cfg.seed.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("train requires a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = DenoiserModel(seed=cfg.seed)
    params = model.get_params()
    velocity = np.zeros_like(params)
    trace = []
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        grad_sum = np.zeros_like(params)
        loss_sum = jt_sum = jb_sum = 0.0
        for k in idx:
            i = int(rng.integers(1, sched.steps + 1))
            res = masked_loss(dataset[k], sched, model, i, rng, cfg)
            grad_sum += res.grads
            loss_sum += res.loss
            jt_sum += res.j_target
            jb_sum += res.j_blank
        n = cfg.batch_size
        loss = loss_sum / n
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        # overflow here is caught by the divergence check on the next loss
        with np.errstate(over="ignore", invalid="ignore"):
            velocity = cfg.momentum * velocity - cfg.learning_rate * grad_sum / n
            params = params + velocity
        model.set_params(params)
        trace.append((it, loss, jt_sum / n, jb_sum / n))
    return model, trace


def save_trace(trace, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "j_target", "j_blank"])
        for row in trace:
            writer.writerow([row[0], f"{row[1]:.17g}", f"{row[2]:.17g}", f"{row[3]:.17g}"])
