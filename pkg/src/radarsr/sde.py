"""Mean-reverting (Ornstein-Uhlenbeck) SDE core.

Forward process: dx = theta_t (mu - x) dt + sigma_t dw with
sigma_t^2 / theta_t = 2 lam^2, so the terminal distribution is
N(mu, lam^2). Closed-form marginals:

    m_t = mu + (x0 - mu) exp(-theta_bar_t)
    v_t = lam^2 (1 - exp(-2 theta_bar_t))
    theta_bar_t = sum_{k<=t} theta_k dt

Time runs over integer steps t in [0, T] with dt = 1 by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import BevGrid, BevImage
from .errors import ConfigError, DegenerateVariance


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized mean-reversion schedule.

    theta[i] is the reversion rate on the step from t = i to t = i + 1,
    i.e. the rate attributed to time index t = i + 1.
    """

    theta: np.ndarray
    lam: float = 50.0 / 255.0
    dt: float = 1.0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if theta.size == 0 or np.any(theta <= 0):
            raise ValueError("theta must be a nonempty positive sequence")
        if self.lam <= 0 or self.dt <= 0:
            raise ValueError("lam and dt must be positive")
        object.__setattr__(self, "theta", theta)
        # prefix integral: theta_bar[t] for t = 0..T
        theta_bar = np.concatenate([[0.0], np.cumsum(theta) * self.dt])
        object.__setattr__(self, "_theta_bar", theta_bar)

    @property
    def steps(self):
        return self.theta.shape[0]

    def theta_at(self, t):
        """Reversion rate driving the step ending at time index t (1-based)."""
        if not 1 <= t <= self.steps:
            raise ValueError(f"step index {t} outside [1, {self.steps}]")
        return float(self.theta[t - 1])

    def sigma_at(self, t):
        """Diffusion coefficient with sigma^2 = 2 lam^2 theta."""
        return float(np.sqrt(2.0 * self.lam**2 * self.theta_at(t)))

    def theta_bar(self, t):
        if not 0 <= t <= self.steps:
            raise ValueError(f"time index {t} outside [0, {self.steps}]")
        return float(self._theta_bar[t])

    def mean_coeff(self, t):
        """exp(-theta_bar_t), the surviving fraction of (x0 - mu)."""
        return float(np.exp(-self.theta_bar(t)))

    def var(self, t):
        """Marginal variance v_t = lam^2 (1 - exp(-2 theta_bar_t))."""
        return float(self.lam**2 * -np.expm1(-2.0 * self.theta_bar(t)))

    @classmethod
    def constant(cls, steps=100, theta_bar_total=5.3, lam=50.0 / 255.0, dt=1.0):
        """Constant rate reaching exp(-theta_bar_total) terminal mean decay."""
        theta = np.full(steps, theta_bar_total / (steps * dt))
        return cls(theta, lam=lam, dt=dt)

    @classmethod
    def cosine(cls, steps=100, theta_bar_total=5.3, lam=50.0 / 255.0, dt=1.0):
        """Cosine ramp: slow early, fast late, same total integral."""
        i = np.arange(1, steps + 1)
        raw = 1.0 - np.cos(np.pi * i / (steps + 1))
        theta = raw * (theta_bar_total / (raw.sum() * dt))
        return cls(theta, lam=lam, dt=dt)

    def save(self, path):
        kind = "constant" if np.allclose(self.theta, self.theta[0]) else "explicit"
        with open(path, "w") as f:
            f.write(f"steps = {self.steps}\n")
            f.write(f"theta_bar_total = {self.theta_bar(self.steps):.17g}\n")
            f.write(f"lambda = {self.lam:.17g}\n")
            f.write(f"dt = {self.dt:.17g}\n")
            f.write(f"schedule_kind = {kind}\n")
            if kind == "explicit":
                f.write("theta = " + " ".join(f"{v:.17g}" for v in self.theta) + "\n")

    @classmethod
    def load(cls, path):
        kv = {}
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        try:
            steps = int(kv["steps"])
            lam = float(kv["lambda"])
            dt = float(kv["dt"])
            kind = kv["schedule_kind"]
            if kind == "constant":
                return cls.constant(steps, float(kv["theta_bar_total"]), lam, dt)
            if kind == "cosine":
                return cls.cosine(steps, float(kv["theta_bar_total"]), lam, dt)
            theta = np.array([float(v) for v in kv["theta"].split()])
            return cls(theta, lam=lam, dt=dt)
        except KeyError as e:
            raise ConfigError(f"schedule file {path!r} missing key {e}") from e


def _check_shapes(x0, mu):
    x0 = np.asarray(x0, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if x0.shape != mu.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {mu.shape}")
    return x0, mu


def marginal(x0, mu, sched: NoiseSchedule, t):
    """Closed-form mean and variance of x(t) given x(0) = x0."""
    x0, mu = _check_shapes(x0, mu)
    coeff = sched.mean_coeff(t)
    m = mu + (x0 - mu) * coeff
    return m, sched.var(t)


def forward_sample(x0, mu, sched: NoiseSchedule, t, rng):
    """Draw x(t) = m_t + sqrt(v_t) eps; returns (x_t, eps)."""
    m, v = marginal(x0, mu, sched, t)
    eps = rng.standard_normal(m.shape)
    return m + np.sqrt(v) * eps, eps


def euler_forward_path(x0, mu, sched: NoiseSchedule, substeps, rng,
                       sigma_override=None):
    """Euler-Maruyama simulation of the forward SDE.

    Verification oracle for the closed-form marginals; returns the state at
    every integer time index 0..T. sigma_override replaces the schedule's
    diffusion coefficient (e.g. 0 for the noiseless ODE limit).
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x0, mu = _check_shapes(x0, mu)
    x = x0.copy()
    states = [x.copy()]
    h = sched.dt / substeps
    sqrt_h = np.sqrt(h)
    for t in range(1, sched.steps + 1):
        theta = sched.theta_at(t)
        sigma = sched.sigma_at(t) if sigma_override is None else sigma_override
        for _ in range(substeps):
            dw = rng.standard_normal(x.shape) * sqrt_h
            x = x + theta * (mu - x) * h + sigma * dw
        states.append(x.copy())
    return states


def true_score(x_t, m_t, v_t):
    """Gaussian score -(x_t - m_t) / v_t."""
    if v_t <= 0:
        raise DegenerateVariance(f"v_t = {v_t} is not positive")
    return -(np.asarray(x_t, dtype=np.float64) - m_t) / v_t


def reverse_step(x_t, mu, sched: NoiseSchedule, t, score, rng=None,
                 stochastic=True):
    """One reverse-time Euler-Maruyama update from time t to t - 1.

    Integrates dx = [theta_t (mu - x) - sigma_t^2 score] dt backward:
        x_{t-1} = x_t - drift * dt (+ sigma_t sqrt(dt) z when stochastic).
    """
    x_t, mu = _check_shapes(x_t, mu)
    theta = sched.theta_at(t)
    sigma = sched.sigma_at(t)
    drift = theta * (mu - x_t) - sigma**2 * np.asarray(score)
    x_prev = x_t - drift * sched.dt
    if stochastic:
        if rng is None:
            raise ValueError("stochastic reverse_step needs an rng")
        x_prev = x_prev + sigma * np.sqrt(sched.dt) * rng.standard_normal(x_t.shape)
    return x_prev


def enhance(mu: BevImage, model, sched: NoiseSchedule, rng,
            stochastic=True, record=None) -> BevImage:
    """Run the full reverse chain from x(T) = mu + lam * noise.

    model.predict(x_t, mu, t) returns the predicted noise; the score used is
    -predicted / sqrt(v_t). The stochastic sampler never injects noise on the
    final step so the output stays mean-correct. Output is clamped to [0, 1];
    intermediate states are not.
    """
    mu_arr = mu.pixels
    x = mu_arr + sched.lam * rng.standard_normal(mu_arr.shape)
    if record is not None:
        record.append(x.copy())
    for t in range(sched.steps, 0, -1):
        eps_hat = model.predict(x, mu_arr, t)
        score = -eps_hat / np.sqrt(sched.var(t))
        noisy = stochastic and t > 1
        x = reverse_step(x, mu_arr, sched, t, score, rng=rng, stochastic=noisy)
        if record is not None:
            record.append(x.copy())
    return BevImage(mu.grid, np.clip(x, 0.0, 1.0))
