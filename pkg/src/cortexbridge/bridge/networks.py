"""Generator and critic networks.

Both networks take disk batches of shape (B, H, W) together with the disk
mask and only ever see masked-in pixels. Activations are smooth (SiLU) so
finite-difference gradient checks are meaningful everywhere.

Generator architectures
-----------------------
``unet``  encoder-decoder with ``depth`` stride-2 down blocks and matching up
          blocks with skip connections; a sinusoidal time embedding is added
          channel-wise in every block and a noise vector of width
          ``noise_width`` is concatenated at the bottleneck. The output is a
          residual added to the input; with ``out_init="zero"`` the final
          convolution starts at zero so the untrained generator is the
          identity.
``mlp``   per-image fully connected network on the flattened pixels, used for
          tiny problems such as the 1-D Gaussian toy (1x1 disks).

Critic architectures
--------------------
``conv``  ``depth`` stride-2 conv blocks, masked global average, linear head.
``mlp``   fully connected on the flattened pixels.
The critic head starts at zero, so an untrained critic outputs 0. With
``time_conditioned=True`` the critic also receives the grid time ``t_i`` of
the batch (sinusoidal embedding), so it compares ``q(x1 | t_i)`` with the
target marginal separately for every step instead of their mixture.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

GENERATOR_DEFAULTS = {
    "kind": "unet",
    "base_channels": 16,
    "depth": 4,
    "noise_width": 4,
    "emb_dim": 32,
    "hidden": 64,
    "out_init": "zero",
    "image_size": None,
}

CRITIC_DEFAULTS = {
    "kind": "conv",
    "base_channels": 16,
    "depth": 4,
    "hidden": 64,
    "image_size": None,
    "time_conditioned": False,
    "emb_dim": 32,
}


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of times in [0, 1], shape (B, dim)."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = 100.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _channels(base, depth):
    return [base * min(2**k, 4) for k in range(depth + 1)]


class UNetGenerator(nn.Module):
    def __init__(self, base_channels=16, depth=4, noise_width=4, emb_dim=32, out_init="zero", **_):
        super().__init__()
        ch = _channels(base_channels, depth)
        self.depth = depth
        self.noise_width = noise_width
        self.emb_dim = emb_dim
        self.inc = nn.Conv2d(2, ch[0], 3, padding=1)
        self.downs = nn.ModuleList(nn.Conv2d(ch[k], ch[k + 1], 3, stride=2, padding=1) for k in range(depth))
        self.temb = nn.ModuleList(nn.Linear(emb_dim, c) for c in ch)
        self.mix = nn.Conv2d(ch[depth] + noise_width, ch[depth], 1)
        self.ups = nn.ModuleList(nn.Conv2d(ch[k + 1] + ch[k], ch[k], 3, padding=1) for k in range(depth))
        self.utemb = nn.ModuleList(nn.Linear(emb_dim, ch[k]) for k in range(depth))
        self.out = nn.Conv2d(ch[0], 1, 3, padding=1)
        if out_init == "zero":
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        self.act = nn.SiLU()

    def forward(self, x, t, noise, mask):
        m = mask.to(x.dtype).expand_as(x)
        e = time_embedding(t, self.emb_dim).to(x.dtype)
        if e.shape[0] == 1 and x.shape[0] > 1:
            e = e.expand(x.shape[0], -1)
        h = self.act(self.inc(torch.stack([x * m, m], dim=1)) + self.temb[0](e)[:, :, None, None])
        skips = [h]
        for k, down in enumerate(self.downs):
            h = self.act(down(h) + self.temb[k + 1](e)[:, :, None, None])
            skips.append(h)
        nz = noise[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = self.act(self.mix(torch.cat([h, nz], dim=1)))
        for k in reversed(range(self.depth)):
            skip = skips[k]
            h = nn.functional.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = self.act(self.ups[k](torch.cat([h, skip], dim=1)) + self.utemb[k](e)[:, :, None, None])
        return (x + self.out(h)[:, 0]) * m


class MLPGenerator(nn.Module):
    def __init__(self, image_size=(1, 1), noise_width=4, emb_dim=32, hidden=64, out_init="zero", **_):
        super().__init__()
        n = int(np.prod(image_size))
        self.emb_dim = emb_dim
        self.net = nn.Sequential(
            nn.Linear(n + emb_dim + noise_width, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, n),
        )
        if out_init == "zero":
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x, t, noise, mask):
        m = mask.to(x.dtype).expand_as(x)
        b = x.shape[0]
        e = time_embedding(t, self.emb_dim).to(x.dtype)
        if e.shape[0] == 1 and b > 1:
            e = e.expand(b, -1)
        flat = (x * m).reshape(b, -1)
        return (x + self.net(torch.cat([flat, e, noise], dim=1)).reshape(x.shape)) * m


def _batch_embedding(t, batch, dim, dtype):
    e = time_embedding(0.0 if t is None else t, dim).to(dtype)
    return e.expand(batch, -1) if e.shape[0] == 1 else e


class ConvCritic(nn.Module):
    def __init__(self, base_channels=16, depth=4, time_conditioned=False, emb_dim=32, **_):
        super().__init__()
        ch = _channels(base_channels, depth)
        self.inc = nn.Conv2d(2, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList(nn.Conv2d(ch[k], ch[k + 1], 3, stride=2, padding=1) for k in range(depth))
        self.emb_dim = emb_dim
        self.temb = nn.Linear(emb_dim, ch[depth]) if time_conditioned else None
        self.head = nn.Linear(ch[depth], 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.act = nn.SiLU()

    def forward(self, x, mask, t=None):
        m = mask.to(x.dtype).expand_as(x)
        h = self.act(self.inc(torch.stack([x * m, m], dim=1)))
        for blk in self.blocks:
            h = self.act(blk(h))
        h = h.mean(dim=(2, 3))
        if self.temb is not None:
            h = self.act(h + self.temb(_batch_embedding(t, x.shape[0], self.emb_dim, x.dtype)))
        return self.head(h)[:, 0]


class MLPCritic(nn.Module):
    def __init__(self, image_size=(1, 1), hidden=64, time_conditioned=False, emb_dim=32, **_):
        super().__init__()
        n = int(np.prod(image_size))
        self.emb_dim = emb_dim if time_conditioned else 0
        self.net = nn.Sequential(
            nn.Linear(n + self.emb_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, 1)
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x, mask, t=None):
        m = mask.to(x.dtype).expand_as(x)
        h = (x * m).reshape(x.shape[0], -1)
        if self.emb_dim:
            h = torch.cat([h, _batch_embedding(t, x.shape[0], self.emb_dim, x.dtype)], dim=1)
        return self.net(h)[:, 0]


def _build(module_cls, arch, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return module_cls(**arch)


class _Model:
    """Shared plumbing: architecture descriptor, seed and flat parameters."""

    def __init__(self, net: nn.Module, arch: dict, seed: int):
        self.net = net
        self.arch = arch
        self.seed = int(seed)

    @property
    def phi(self) -> np.ndarray:
        return parameters_to_vector(self.net.parameters()).detach().cpu().numpy().astype(np.float64)

    def set_phi(self, vec):
        ref = next(self.net.parameters())
        vector_to_parameters(torch.as_tensor(np.asarray(vec), dtype=ref.dtype), self.net.parameters())

    def parameters(self):
        return self.net.parameters()

    def to(self, dtype):
        self.net.to(dtype)
        return self

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def descriptor(self) -> dict:
        return {"arch": self.arch, "seed": self.seed}


class GeneratorModel(_Model):
    """Stochastic time-conditioned generator ``(x_t, t, noise) -> x1_hat``."""

    def __init__(self, arch: dict | None = None, seed: int = 0):
        arch = {**GENERATOR_DEFAULTS, **(arch or {})}
        if arch["image_size"] is not None:
            arch["image_size"] = list(arch["image_size"])
        cls = {"unet": UNetGenerator, "mlp": MLPGenerator}[arch["kind"]]
        super().__init__(_build(cls, arch, seed), arch, seed)

    @property
    def noise_width(self) -> int:
        return int(self.arch["noise_width"])

    def __call__(self, x, t, noise, mask):
        return self.net(x, t, noise, mask)

    def draw_noise(self, batch: int, generator: torch.Generator) -> torch.Tensor:
        return torch.randn((batch, self.noise_width), generator=generator, dtype=self.dtype)

    def sample(self, x, t, generator: torch.Generator, mask=None):
        if mask is None:
            mask = torch.ones(x.shape[-2:], dtype=torch.bool)
        x = x.to(self.dtype)
        return self.net(x, t, self.draw_noise(x.shape[0], generator), mask)


class CriticModel(_Model):
    """Scalar-logit discriminator on disk images."""

    def __init__(self, arch: dict | None = None, seed: int = 0):
        arch = {**CRITIC_DEFAULTS, **(arch or {})}
        if arch["image_size"] is not None:
            arch["image_size"] = list(arch["image_size"])
        cls = {"conv": ConvCritic, "mlp": MLPCritic}[arch["kind"]]
        super().__init__(_build(cls, arch, seed), arch, seed)

    @property
    def time_conditioned(self) -> bool:
        return bool(self.arch.get("time_conditioned", False))

    def __call__(self, x, mask, t=None):
        return self.net(x, mask, t)
