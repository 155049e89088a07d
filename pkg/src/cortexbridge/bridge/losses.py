"""Training losses for the bridge generator.

All losses take (B, H, W) tensors and a (H, W) boolean disk mask; pixels
outside the mask never contribute.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..metrics import ms_levels, ms_ssim_t
from .sampling import BridgeConfig

ENTROPY_JITTER = 1e-3
NCE_PATCHES = 64
NCE_PATCH_SIZE = 16
NCE_TEMPERATURE = 0.07
NCE_EMBED = 64


def _mask(mask, like):
    return torch.as_tensor(mask).to(torch.bool).expand_as(like)


def masked_mean(x, mask):
    """Mean over masked pixels and batch."""
    m = _mask(mask, x)
    return torch.where(m, x, torch.zeros((), dtype=x.dtype)).sum() / m.sum()


def transport_cost(x_t, x1_hat, mask):
    """Masked per-pixel mean squared difference."""
    return masked_mean((x_t - x1_hat) ** 2, mask)


def gaussian_proxy_entropy(draws, mask):
    """Differential entropy of a per-pixel Gaussian fitted to generator draws.

    ``draws`` has shape (K, B, H, W): K generator outputs for the same inputs
    with resampled noise. The per-pixel unbiased variance across draws, plus a
    small jitter, gives ``0.5 * log(2 pi e var)``, averaged over masked
    pixels and the batch.
    """
    var = draws.var(dim=0, unbiased=True)
    h = 0.5 * torch.log(2 * math.pi * math.e * (var + ENTROPY_JITTER))
    return masked_mean(h, mask)


def sb_loss(x_t, x1_hat, t_i: float, cfg: BridgeConfig, mask, draws=None):
    """Transport cost minus ``2 tau (1 - t_i)`` times the entropy estimate.

    Parameters
    ----------
    draws : Tensor, shape (K, B, H, W), optional
        Generator draws for the entropy estimate; required unless the
        estimator is ``"off"``.
    """
    cost = transport_cost(x_t, x1_hat, mask)
    weight = 2.0 * cfg.tau * (1.0 - t_i)
    if cfg.entropy_estimator == "off" or weight == 0.0:
        return cost
    if draws is None:
        raise ValueError("gaussian-proxy entropy needs generator draws")
    return cost - weight * gaussian_proxy_entropy(draws, mask)


def adv_loss(critic, real, fake, mask, t=None):
    """Logistic discriminator game.

    ``t`` is the grid time of the batch; it is passed on only to
    time-conditioned critics and ignored otherwise.

    Returns
    -------
    generator_term : non-saturating loss ``mean softplus(-D(fake))``
    critic_term : binary cross-entropy averaged over the 2B real and fake samples
    """
    if getattr(critic, "time_conditioned", False):
        lr, lf = critic(real, mask, t), critic(fake, mask, t)
    else:
        lr, lf = critic(real, mask), critic(fake, mask)
    critic_term = torch.cat([F.softplus(-lr), F.softplus(lf)]).mean()
    generator_term = F.softplus(-lf).mean()
    return generator_term, critic_term


class PatchEncoder:
    """Frozen random-projection patch encoder ``normalize(W2 |W1 p|)``.

    The absolute value makes the embedding even, so the contrastive loss is
    invariant to a joint sign flip of both images.
    """

    def __init__(self, patch_size: int, dim: int = NCE_EMBED, seed: int = 0, dtype=torch.float64):
        g = torch.Generator()
        g.manual_seed(seed)
        n = patch_size * patch_size
        self.patch_size = patch_size
        self.w1 = (torch.randn((n, dim), generator=g, dtype=torch.float64) / math.sqrt(n)).to(dtype)
        self.w2 = (torch.randn((dim, dim), generator=g, dtype=torch.float64) / math.sqrt(dim)).to(dtype)

    def __call__(self, patches):
        h = torch.abs(patches @ self.w1.to(patches.dtype)) @ self.w2.to(patches.dtype)
        return h / torch.sqrt((h * h).sum(dim=-1, keepdim=True) + 1e-12)


def nce_patch_size(shape) -> int:
    return max(1, min(NCE_PATCH_SIZE, shape[-2] // 2, shape[-1] // 2))


def patch_locations(mask, patch_size: int, n: int = NCE_PATCHES, generator: torch.Generator | None = None):
    """Top-left corners of up to ``n`` distinct patches whose centre pixel is masked in."""
    m = torch.as_tensor(mask).to(torch.bool)
    h, w = m.shape
    c = patch_size // 2
    rows = torch.arange(h - patch_size + 1)
    cols = torch.arange(w - patch_size + 1)
    ok = m[rows[:, None] + c, cols[None, :] + c]
    idx = torch.nonzero(ok.reshape(-1)).reshape(-1)
    if len(idx) > n:
        perm = torch.randperm(len(idx), generator=generator)[:n]
        idx = idx[torch.sort(perm).values]
    return idx, len(cols)


def patch_contrastive_loss(x0, x1_hat, mask, encoder: PatchEncoder | None = None, generator=None, locations=None,
                           temperature: float = NCE_TEMPERATURE):
    """PatchNCE between co-located patches of ``x0`` and ``x1_hat``.

    For every sampled location the embedding of the ``x1_hat`` patch must
    pick out the ``x0`` patch at the same location among the patches at the
    other sampled locations (cross-entropy, temperature 0.07). With a single
    location there are no negatives and the loss is defined as 0.
    """
    m = _mask(mask, x0)
    zero = torch.zeros((), dtype=x0.dtype)
    a = torch.where(m, x0, zero)
    b = torch.where(m, x1_hat, zero)
    p = nce_patch_size(x0.shape)
    if encoder is None:
        encoder = PatchEncoder(p, dtype=x0.dtype)
    if locations is None:
        locations, _ = patch_locations(mask, p, generator=generator)
    if len(locations) < 2:
        return (x1_hat * 0).sum()
    ua = F.unfold(a[:, None], p)[:, :, locations].transpose(1, 2)  # (B, L, p*p)
    ub = F.unfold(b[:, None], p)[:, :, locations].transpose(1, 2)
    q = encoder(ub)
    k = encoder(ua)
    logits = q @ k.transpose(1, 2) / temperature  # (B, L, L)
    target = torch.arange(logits.shape[1]).expand(logits.shape[0], -1)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


def msssim_loss(x0, x1_hat, mask):
    """``1 - MS-SSIM`` averaged over the batch; levels fitted to the image size."""
    return 1.0 - ms_ssim_t(x0, x1_hat, mask, levels=ms_levels(x0.shape)).mean()
