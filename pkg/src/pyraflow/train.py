"""Training: EPE loss, Adam, per-level targets and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointMeta, load_checkpoint, save_checkpoint  # noqa: F401
from .errors import ConfigError, NumericError
from .model import PyramidNet
from .synth import Sample
from .tensor import DTYPE

log = logging.getLogger(__name__)

EPE_EPS = 1e-8

# reference figures for the full-size model, printed next to ours for context
REFERENCE_PARAMS = 4.2e6
REFERENCE_BYTES = 7.8e6


@dataclass
class TrainConfig:
    epochs: int = 30  # per level in sequential mode, total in end-to-end mode
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epe_eps: float = EPE_EPS
    seed: int = 0
    split: float = 0.9
    mode: str = "sequential"  # or "end-to-end"
    # sequential mode: start each finer predictor from the trained coarser one
    # when their layouts match (every level solves the same residual problem)
    warm_start: bool = True

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not (self.adam_eps > 0 and self.epe_eps > 0):
            raise ConfigError("epsilons must be > 0")
        if not 0 < self.split < 1:
            raise ConfigError("split must lie in (0, 1)")
        if self.mode not in ("sequential", "end-to-end"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# loss and optimizer


def epe_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, eps: float = EPE_EPS):
    """Mean of sqrt(du^2 + dv^2 + eps) over mask=1 pixels, and its gradient.

    Works on (2, H, W) or batched (N, 2, H, W) flows with a matching
    (1, H, W) / (N, 1, H, W) mask (None means every pixel).
    """
    pred = np.asarray(pred, dtype=DTYPE)
    gt = np.asarray(gt, dtype=DTYPE)
    if pred.shape != gt.shape or pred.shape[-3] != 2:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} must be matching flows")
    if mask is None:
        mask = np.ones(pred.shape[:-3] + (1,) + pred.shape[-2:], DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != pred.shape[:-3] + (1,) + pred.shape[-2:]:
        raise ConfigError(f"mask {mask.shape} does not match flow {pred.shape}")
    count = float(mask.sum(dtype=np.float64))
    if count == 0:
        raise ConfigError("EPE undefined: mask selects no pixels")
    diff = pred - gt
    mag = np.sqrt((diff * diff).sum(axis=-3, keepdims=True) + DTYPE(eps))
    loss = float((mag * mask).sum(dtype=np.float64) / count)
    grad = diff / mag * (mask / DTYPE(count))
    return loss, grad.astype(DTYPE, copy=False)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if t < 1:
        raise ValueError("Adam step index t must be >= 1")
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ConfigError("parameter and gradient shapes differ")
    b1, b2 = DTYPE(cfg.beta1), DTYPE(cfg.beta2)
    c1 = DTYPE(1 - cfg.beta1**t)
    c2 = DTYPE(1 - cfg.beta2**t)
    lr, eps = DTYPE(cfg.lr), DTYPE(cfg.adam_eps)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# targets


def flow_pyramid_targets(gt_flow: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level l target: ``gt_flow`` block-averaged l times, scaled by 2**-l."""
    out = [np.asarray(gt_flow, dtype=DTYPE)]
    cur = out[0]
    for lvl in range(1, levels):
        cur = T.avg_downsample2x(cur)
        out.append(cur * DTYPE(0.5**lvl))
    return out


def mask_pyramid(mask: np.ndarray, levels: int) -> list[np.ndarray]:
    """A coarse pixel is valid only if every fine pixel it averages is."""
    out = [np.asarray(mask, dtype=DTYPE)]
    for _ in range(1, levels):
        out.append((T.avg_downsample2x(out[-1]) == 1).astype(DTYPE))
    return out


def stack_samples(samples: list[Sample]):
    img1 = np.stack([s.image1 for s in samples]).astype(DTYPE)
    img2 = np.stack([s.image2 for s in samples]).astype(DTYPE)
    flow = np.stack([s.gt_flow for s in samples]).astype(DTYPE)
    mask = np.stack([s.valid_mask for s in samples]).astype(DTYPE)
    return img1, img2, flow, mask


def split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/val split; train is never empty."""
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_train = min(n, max(1, int(math.floor(cfg.split * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------------------
# training loop


def _level_params(layers) -> list[np.ndarray]:
    return [a for layer in layers for a in (layer.weight, layer.bias)]


def _flat_grads(grads) -> list[np.ndarray]:
    return [a for pair in grads for a in pair]


def _masked_epe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    d = np.sqrt(((pred.astype(np.float64) - gt) ** 2).sum(axis=1, keepdims=True))
    count = mask.sum(dtype=np.float64)
    return float((d * mask).sum() / count) if count else math.nan


def _batches(idx: np.ndarray, size: int):
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


def _predict_level(layers, x: np.ndarray, flow_up: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = np.empty_like(flow_up)
    for i in range(0, len(x), chunk):
        res, _ = M.predictor_forward(layers, x[i:i + chunk])
        out[i:i + chunk] = flow_up[i:i + chunk] + res
    return out


def predict(net: PyramidNet, img1: np.ndarray, img2: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Finest-level flow for a batch of image pairs, computed in chunks."""
    out = np.empty((len(img1), 2) + img1.shape[2:], DTYPE)
    for i in range(0, len(img1), chunk):
        flows, _ = M.forward(net, img1[i:i + chunk], img2[i:i + chunk])
        out[i:i + chunk] = flows[0]
    return out


def _check_loss(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite training loss at {where}")


def train(net: PyramidNet, dataset: list[Sample], cfg: TrainConfig | None = None, on_epoch=None):
    """Train a copy of ``net``; returns (trained net, history).

    ``history`` holds one dict per epoch with keys level, epoch, train_loss,
    val_epe, wall_ms. ``on_epoch`` is called with each record as it lands.
    """
    cfg = (cfg or TrainConfig()).validate()
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    net = net.copy()
    history: list[dict] = []
    if cfg.epochs == 0:
        return net, history
    h, w = net.config.height, net.config.width
    if any(s.image1.shape != (3, h, w) for s in dataset):
        raise ConfigError(f"dataset resolution does not match the model's 3x{h}x{w}")
    img1, img2, gt, mask = stack_samples(dataset)
    train_idx, val_idx = split_indices(len(dataset), cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    log.info(
        "training %s on %d samples (%d held out), %d parameters",
        cfg.mode, len(train_idx), len(val_idx), M.count_params(net),
    )

    def record(level, epoch, losses, val_epe, t0):
        rec = {
            "level": level,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_epe": val_epe,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        history.append(rec)
        log.info("level %d epoch %d: train loss %.4f, val EPE %.4f", level, epoch, rec["train_loss"], val_epe)
        if on_epoch is not None:
            on_epoch(rec)

    if cfg.mode == "sequential":
        _train_sequential(net, img1, img2, gt, mask, train_idx, val_idx, cfg, rng, record)
    else:
        _train_end_to_end(net, img1, img2, gt, mask, train_idx, val_idx, cfg, rng, record)
    return net, history


def _train_sequential(net, img1, img2, gt, mask, train_idx, val_idx, cfg, rng, record):
    k = net.levels
    pyr1 = M.build_pyramid(M.normalize_images(img1), k)
    pyr2 = M.build_pyramid(M.normalize_images(img2), k)
    targets = flow_pyramid_targets(gt, k)
    masks = mask_pyramid(mask, k)
    coarser = None
    for lvl in reversed(range(k)):
        n = len(img1)
        hl, wl = pyr1[lvl].shape[2:]
        if coarser is None:
            flow_up = np.zeros((n, 2, hl, wl), DTYPE)
        else:
            flow_up = M.upsample_flow(coarser, hl, wl)
        x_all = M.level_input(pyr1[lvl], pyr2[lvl], flow_up)
        layers = net.nets[lvl]
        if cfg.warm_start and lvl + 1 < k and M.same_layout(layers, net.nets[lvl + 1]):
            for dst, src in zip(layers, net.nets[lvl + 1]):
                dst.weight[...] = src.weight
                dst.bias[...] = src.bias
        params = _level_params(layers)
        state = AdamState.zeros_like(params)
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            losses = []
            for b in _batches(rng.permutation(train_idx), cfg.batch_size):
                if not masks[lvl][b].any():
                    continue
                res, ctxs = M.predictor_forward(layers, x_all[b], keep=True)
                loss, g = epe_loss(flow_up[b] + res, targets[lvl][b], masks[lvl][b], cfg.epe_eps)
                _check_loss(loss, f"level {lvl} epoch {epoch}")
                grads, _ = M.predictor_backward(layers, ctxs, g)
                step += 1
                adam_step(params, _flat_grads(grads), state, step, cfg)
                losses.append(loss)
            val = math.nan
            if len(val_idx):
                pred = _predict_level(layers, x_all[val_idx], flow_up[val_idx])
                val = _masked_epe(pred, targets[lvl][val_idx], masks[lvl][val_idx])
            record(lvl, epoch, losses or [math.nan], val, t0)
        coarser = _predict_level(layers, x_all, flow_up)


def _train_end_to_end(net, img1, img2, gt, mask, train_idx, val_idx, cfg, rng, record):
    params = [a for level in net.nets for a in _level_params(level)]
    state = AdamState.zeros_like(params)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b in _batches(rng.permutation(train_idx), cfg.batch_size):
            if not mask[b].any():
                continue
            flows, cache = M.forward(net, img1[b], img2[b], keep=True)
            loss, g = epe_loss(flows[0], gt[b], mask[b], cfg.epe_eps)
            _check_loss(loss, f"epoch {epoch}")
            grads = M.backward(net, cache, [g] + [None] * (net.levels - 1))
            step += 1
            adam_step(params, [a for level in grads for a in _flat_grads(level)], state, step, cfg)
            losses.append(loss)
        val = math.nan
        if len(val_idx):
            val = _masked_epe(predict(net, img1[val_idx], img2[val_idx]), gt[val_idx], mask[val_idx])
        record(0, epoch, losses or [math.nan], val, t0)
