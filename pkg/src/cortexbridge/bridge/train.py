"""Unpaired bridge training, inference and checkpoints.

One training step:

1. draw a source batch ``x0`` and an unrelated target batch ``x1``;
2. draw a grid index ``i`` and simulate ``x_{t_i}`` from ``x0`` without
   gradients using the current generator;
3. predict ``x1_hat = G(x_{t_i}, t_i, noise)`` (plus extra draws for the
   entropy estimate);
4. update the critic on ``x1`` versus ``x1_hat``;
5. update the generator on
   ``L_adv + lambda_sb L_SB + lambda_nce L_NCE + lambda_ms (1 - MS-SSIM)``,
   where both regularizers compare ``x1_hat`` with ``x0``.

Adam (betas 0.5, 0.999) with a constant learning rate for the first half of
the epochs and a linear decay towards zero afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigInvalid, NumericalDivergence, ShapeMismatch
from ..io import read_checkpoint, write_checkpoint, write_csv
from .losses import PatchEncoder, adv_loss, msssim_loss, nce_patch_size, patch_contrastive_loss, patch_locations, sb_loss
from .networks import CriticModel, GeneratorModel
from .sampling import BridgeConfig, sample_bridge_t, simulate_trajectory

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "L_Adv", "L_SB", "L_NCE", "L_MSSSIM", "total"]


@dataclass(frozen=True)
class TrainOptions:
    """Optimization settings.

    ``critic_steps`` critic updates are taken per generator update (extra
    steps draw fresh target batches) and the critic learning rate is
    ``lr * critic_lr_scale``; the defaults give one alternating update at a
    shared rate.
    """

    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    checkpoint_every: int = 10
    checkpoint_dir: str | None = None
    seed: int = 0
    generator_arch: dict = field(default_factory=dict)
    critic_arch: dict = field(default_factory=dict)
    dtype: str = "float32"
    critic_steps: int = 1
    critic_lr_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.critic_steps < 1:
            raise ConfigInvalid("epochs, batch_size and critic_steps must be >= 1")
        if not (self.lr > 0 and self.critic_lr_scale > 0):
            raise ConfigInvalid("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_factor(epoch: int, epochs: int) -> float:
    """1 for the first half of the epochs, then linear decay towards 0."""
    keep = epochs // 2
    if epoch < keep:
        return 1.0
    return 1.0 - (epoch - keep + 1) / (epochs - keep + 1)


def _stack(data):
    """Accept an (N, H, W) array plus mask, a DiskSeries, or a list of them."""
    if isinstance(data, tuple) and len(data) == 2:
        grids, mask = data
        return np.asarray(grids, dtype=np.float64), np.asarray(mask, dtype=bool)
    items = data if isinstance(data, (list, tuple)) else [data]
    mask = items[0].mask
    for s in items:
        if not np.array_equal(s.mask, mask):
            raise ShapeMismatch("all disk series must share one mask")
    return np.concatenate([s.grids for s in items], axis=0), np.asarray(mask)


@torch.no_grad()
def _advance(gen, x0, i, cfg, g, mask):
    steps = cfg.grid.steps
    x = x0
    for j in range(i):
        x1_hat = gen.sample(x, steps[j], g, mask)
        x = sample_bridge_t(x, x1_hat, steps[j], 1.0, steps[j + 1], cfg.tau, g, mask)
    return x


def save_model(path, model, cfg: BridgeConfig | None = None, **meta):
    config = {"model": type(model).__name__, **model.descriptor(), "meta": meta}
    if cfg is not None:
        config["bridge"] = cfg.to_dict()
    write_checkpoint(path, config, model.phi)


def load_model(path):
    """Returns ``(model, bridge_config_or_None, meta)``."""
    config, phi = read_checkpoint(path)
    cls = {"GeneratorModel": GeneratorModel, "CriticModel": CriticModel}[config["model"]]
    model = cls(config["arch"], config["seed"])
    model.set_phi(phi)
    cfg = BridgeConfig.from_dict(config["bridge"]) if "bridge" in config else None
    return model, cfg, config.get("meta", {})


def train(cfg: BridgeConfig, source, target, opt: TrainOptions = TrainOptions(), callback=None):
    """Train generator and critic on unpaired source and target disks.

    Parameters
    ----------
    source, target : DiskSeries, list of DiskSeries, or ``(grids, mask)``
        Both must share the disk mask. No index correspondence is used.
    callback : callable, optional
        Called as ``callback(epoch, gen, critic)`` after every epoch.

    Returns
    -------
    gen : GeneratorModel
    critic : CriticModel
    history : list of dict, one per epoch (see ``HISTORY_COLUMNS``)

    Raises
    ------
    NumericalDivergence
        When a loss becomes non-finite; carries the last checkpoint path.
    """
    src, mask_np = _stack(source)
    tgt, tmask = _stack(target)
    if not np.array_equal(mask_np, tmask):
        raise ShapeMismatch("source and target disks must share one mask")
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("source and target must be nonempty")
    dtype = getattr(torch, opt.dtype)
    shape = list(mask_np.shape)
    gen = GeneratorModel({**opt.generator_arch, "image_size": shape}, seed=opt.seed).to(dtype)
    critic = CriticModel({**opt.critic_arch, "image_size": shape}, seed=opt.seed + 1).to(dtype)
    mask = torch.as_tensor(mask_np)
    src_t = torch.as_tensor(src, dtype=dtype)
    tgt_t = torch.as_tensor(tgt, dtype=dtype)
    g = torch.Generator()
    g.manual_seed(opt.seed)
    p = nce_patch_size(shape)
    encoder = PatchEncoder(p, seed=opt.seed, dtype=dtype)
    g_opt = torch.optim.Adam(gen.parameters(), lr=opt.lr, betas=tuple(opt.betas))
    c_opt = torch.optim.Adam(critic.parameters(), lr=opt.lr * opt.critic_lr_scale, betas=tuple(opt.betas))
    n_steps = max(1, int(np.ceil(len(src) / opt.batch_size)))
    history = []
    last_ckpt = None
    for epoch in range(opt.epochs):
        for o, base in ((g_opt, opt.lr), (c_opt, opt.lr * opt.critic_lr_scale)):
            for group in o.param_groups:
                group["lr"] = base * lr_factor(epoch, opt.epochs)
        order = torch.randperm(len(src), generator=g)
        sums = np.zeros(5)
        for step in range(n_steps):
            idx = order[step * opt.batch_size : (step + 1) * opt.batch_size]
            x0 = src_t[idx]
            x1 = tgt_t[torch.randint(len(tgt), (len(idx),), generator=g)]
            i = int(torch.randint(cfg.grid.N, (1,), generator=g))
            t_i = cfg.grid.steps[i]
            x_t = _advance(gen, x0, i, cfg, g, mask)
            draws = torch.stack([gen(x_t, t_i, gen.draw_noise(len(idx), g), mask) for _ in range(cfg.entropy_draws)])
            x1_hat = draws[0]

            for k in range(opt.critic_steps):
                real = x1 if k == 0 else tgt_t[torch.randint(len(tgt), (len(idx),), generator=g)]
                c_opt.zero_grad()
                _, c_loss = adv_loss(critic, real, x1_hat.detach(), mask, t_i)
                c_loss.backward()
                c_opt.step()

            g_opt.zero_grad()
            l_adv, _ = adv_loss(critic, x1, x1_hat, mask, t_i)
            l_sb = sb_loss(x_t, x1_hat, t_i, cfg, mask, draws)
            if cfg.lambda_reg_patchnce > 0:
                locs, _ = patch_locations(mask, p, generator=g)
                l_nce = patch_contrastive_loss(x0, x1_hat, mask, encoder, locations=locs)
            else:
                l_nce = torch.zeros((), dtype=dtype)
            l_ms = msssim_loss(x0, x1_hat, mask) if cfg.lambda_reg_msssim > 0 else torch.zeros((), dtype=dtype)
            total = l_adv + cfg.lambda_sb * l_sb + cfg.lambda_reg_patchnce * l_nce + cfg.lambda_reg_msssim * l_ms
            vals = torch.stack([l_adv, l_sb, l_nce, l_ms, total]).detach()
            if not (torch.isfinite(vals).all() and torch.isfinite(c_loss)):
                raise NumericalDivergence(f"non-finite loss at epoch {epoch} step {step}", checkpoint=last_ckpt)
            total.backward()
            g_opt.step()
            sums += vals.double().numpy()
        means = sums / n_steps
        history.append(dict(zip(HISTORY_COLUMNS, [epoch + 1, *means.tolist()])))
        logger.info("epoch %d: %s", epoch + 1, history[-1])
        if opt.checkpoint_dir and (epoch + 1) % opt.checkpoint_every == 0:
            d = Path(opt.checkpoint_dir)
            last_ckpt = str(d / f"generator_e{epoch + 1:04d}.bgen")
            save_model(last_ckpt, gen, cfg, epoch=epoch + 1)
            save_model(d / f"critic_e{epoch + 1:04d}.bgen", critic, cfg, epoch=epoch + 1)
        if callback is not None:
            callback(epoch + 1, gen, critic)
    return gen, critic, history


def write_history(path, history):
    write_csv(path, HISTORY_COLUMNS, [[h[c] for c in HISTORY_COLUMNS] for h in history])


def enhance(series, gen: GeneratorModel, cfg: BridgeConfig, seed: int = 0, norm=None):
    """Run an independent trajectory per disk and keep the final prediction.

    Disk ``k`` uses a torch generator seeded with ``seed * 1_000_003 + k``, so
    the result does not depend on batching or ordering.

    Parameters
    ----------
    series : DiskSeries
    norm : Normalization, optional
        Normalization to attach to the output (the target-domain reference);
        defaults to the input's.

    Returns
    -------
    DiskSeries
        Enhanced disks, clipped to [-1, 1], same mask.
    diagnostics : dict
        ``trajectory_variance``: per disk, mean over masked pixels of the
        variance across trajectory states; ``final_step_change``: per disk,
        mean absolute change of the last step.
    """
    size = gen.arch.get("image_size")
    if size is not None and tuple(size) != tuple(series.mask.shape):
        raise ShapeMismatch(f"generator expects {tuple(size)} disks, got {series.mask.shape}")
    mask = torch.as_tensor(np.array(series.mask))
    out = np.zeros(series.grids.shape)
    tv = np.zeros(len(series))
    fc = np.zeros(len(series))
    m = series.mask
    for k in range(len(series)):
        g = torch.Generator()
        g.manual_seed(seed * 1_000_003 + k)
        x0 = torch.tensor(series.grids[k][None], dtype=gen.dtype)
        states = simulate_trajectory(x0, gen, cfg, g, mask)
        stack = torch.stack([s[0] for s in states]).double().numpy()
        out[k] = np.clip(stack[-1], -1.0, 1.0)
        tv[k] = float(stack.var(axis=0)[m].mean())
        fc[k] = float(np.abs(stack[-1] - stack[-2])[m].mean())
    enhanced = series.with_grids(out, norm)
    return enhanced, {"trajectory_variance": tv, "final_step_change": fc}
