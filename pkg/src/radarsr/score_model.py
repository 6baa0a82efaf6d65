"""Noise-prediction models for the reverse sampler.

Two implementations of the predict(x_t, mu, t) contract:

* OracleModel — analytic noise from a known clean image, used to validate
  the sampler and the training objective independently of any learning.
* DenoiserModel — a compact conditional encoder-decoder (torch, float64,
  CPU) conditioned on the degraded image via channel concatenation and on
  the time index via a sinusoidal embedding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, DegenerateVariance
from .sde import NoiseSchedule, marginal

_CKPT_MAGIC = b"SRDM"
_CKPT_VERSION = 1


class OracleModel:
    """Exact noise (x_t - m_t) / sqrt(v_t) computed from the known clean image."""

    def __init__(self, x0, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def predict(self, x_t, mu, t):
        m, v = marginal(self.x0, mu, self.sched, t)
        if v <= 0:
            raise DegenerateVariance(f"oracle prediction undefined at t = {t} (v = {v})")
        return (np.asarray(x_t, dtype=np.float64) - m) / np.sqrt(v)


def time_embedding(t, dim):
    """Sinusoidal embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...].

    Frequencies decay geometrically from 1 to 1/10000 over dim/2 bands.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    emb = np.empty(dim)
    emb[0::2] = np.sin(ang)
    emb[1::2] = np.cos(ang)
    return emb


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    time_dim: int = 32

    @property
    def depth(self):
        return 2  # two pooling levels; spatial sizes must be multiples of 4


class _DenoiserNet(nn.Module):
    """2-level conv encoder-decoder with skip connections and tanh activations."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1 = cfg.base_channels
        c2 = 2 * c1
        conv = lambda ci, co: nn.Conv2d(ci, co, 3, padding=1)
        self.stem = conv(2, c1)
        self.enc1 = conv(c1, c1)
        self.temb1 = nn.Linear(cfg.time_dim, c1)
        self.enc2 = conv(c1, c2)
        self.temb2 = nn.Linear(cfg.time_dim, c2)
        self.mid = conv(c2, c2)
        self.tembm = nn.Linear(cfg.time_dim, c2)
        self.dec2 = conv(c2 + c2, c2)
        self.dec1 = conv(c2 + c1, c1)
        self.head = conv(c1, 1)
        self.pool = nn.AvgPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x, temb):
        # x: (B, 2, H, W); temb: (B, time_dim)
        add = lambda h, lin: h + lin(temb)[:, :, None, None]
        h = torch.tanh(self.stem(x))
        s1 = torch.tanh(self.enc1(add(h, self.temb1)))
        h = self.pool(s1)
        s2 = torch.tanh(self.enc2(h))
        s2 = add(s2, self.temb2)
        h = self.pool(s2)
        h = torch.tanh(self.mid(add(h, self.tembm)))
        h = torch.cat([self.up(h), s2], dim=1)
        h = torch.tanh(self.dec2(h))
        h = torch.cat([self.up(h), s1], dim=1)
        h = torch.tanh(self.dec1(h))
        return self.head(h)


class DenoiserModel:
    """Trainable conditional denoiser wrapping the torch net in float64.

    All parameters live in a flat float64 vector view (get_params /
    set_params) so checkpoints and finite-difference checks are exact.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed=0):
        self.cfg = cfg
        self.net = _DenoiserNet(cfg).double()
        self._init_params(seed)

    def _init_params(self, seed):
        """Uniform +-sqrt(1/fan_in) everywhere; final layer zeroed."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for name, mod in self.net.named_modules():
                if not isinstance(mod, (nn.Conv2d, nn.Linear)):
                    continue
                if name == "head":
                    mod.weight.zero_()
                    mod.bias.zero_()
                    continue
                fan_in = mod.weight[0].numel()
                bound = np.sqrt(1.0 / fan_in)
                mod.weight.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(mod.weight.shape))))
                mod.bias.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(mod.bias.shape))))

    @property
    def param_count(self):
        return sum(p.numel() for p in self.net.parameters())

    def get_params(self):
        return nn.utils.parameters_to_vector(self.net.parameters()).detach().numpy().copy()

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ValueError("parameter vector has wrong length")
        nn.utils.vector_to_parameters(torch.from_numpy(vec.copy()), self.net.parameters())

    def _embed(self, t, batch):
        emb = time_embedding(t, self.cfg.time_dim)
        return torch.from_numpy(np.tile(emb, (batch, 1)))

    def forward_torch(self, x_t, mu, t):
        """Differentiable forward pass. x_t, mu: (B, H, W) tensors."""
        if x_t.shape != mu.shape:
            raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(mu.shape)}")
        inp = torch.stack([x_t, mu], dim=1)
        return self.net(inp, self._embed(t, x_t.shape[0]))[:, 0]

    def predict(self, x_t, mu, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        mu = np.asarray(mu, dtype=np.float64)
        with torch.no_grad():
            out = self.forward_torch(
                torch.from_numpy(x_t[None]), torch.from_numpy(mu[None]), t)
        return out[0].numpy()

    # -- checkpoint format: magic, version, config block, float64 params --

    def save(self, path):
        params = self.get_params()
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<IIIQ", _CKPT_VERSION, self.cfg.base_channels,
                                self.cfg.time_dim, params.shape[0]))
            f.write(params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _CKPT_MAGIC:
                raise CheckpointError(f"{path!r}: bad magic {magic!r}")
            version, base_channels, time_dim, count = struct.unpack("<IIIQ", f.read(20))
            if version != _CKPT_VERSION:
                raise CheckpointError(f"{path!r}: unsupported version {version}")
            payload = f.read(count * 8)
        if len(payload) != count * 8:
            raise CheckpointError(f"{path!r}: truncated parameter block")
        model = cls(ModelConfig(base_channels=base_channels, time_dim=time_dim))
        if model.param_count != count:
            raise CheckpointError(f"{path!r}: parameter count mismatch")
        model.set_params(np.frombuffer(payload, dtype="<f8"))
        return model
