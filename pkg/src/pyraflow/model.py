"""Coarse-to-fine residual flow network.

Each pyramid level owns an independent stack of convolutions that looks at
``[image1 | warp(image2, upsampled flow) | upsampled flow]`` and predicts a
residual added to the upsampled coarser estimate. Level 0 is the finest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import DTYPE, ConvLayer

IN_CHANNELS = 8  # 3 image-1 + 3 warped image-2 + 2 flow
MIN_COARSE = 4
DEFAULT_WIDTHS = (8, 16, 32, 16, 8, 2)
DEFAULT_KERNEL = 7
# images in [0, 1] are mapped to (x - IMAGE_MEAN) * IMAGE_SCALE before
# entering the pyramid; raw inputs carry a large common-mode offset and a
# small spread, which leaves training stuck on a zero-flow plateau
IMAGE_MEAN = 0.5
IMAGE_SCALE = 4.0


@dataclass(frozen=True)
class LevelSpec:
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    kernel: int = DEFAULT_KERNEL

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def validate(self) -> None:
        if len(self.widths) < 2:
            raise ConfigError("a predictor needs at least one layer (two widths)")
        if self.widths[0] != IN_CHANNELS:
            raise ConfigError(f"first predictor layer must take {IN_CHANNELS} channels, got {self.widths[0]}")
        if self.widths[-1] != 2:
            raise ConfigError(f"last predictor layer must emit 2 channels, got {self.widths[-1]}")
        if any(w < 1 for w in self.widths):
            raise ConfigError("layer widths must be >= 1")
        if self.kernel < 1 or self.kernel % 2 != 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel}")


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 3
    height: int = 64
    width: int = 64
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    kernel: int = DEFAULT_KERNEL
    # per-level overrides, index 0 = finest; None replicates (widths, kernel)
    predictors: tuple[LevelSpec, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.predictors is not None:
            specs = tuple(p if isinstance(p, LevelSpec) else LevelSpec(**p) for p in self.predictors)
            object.__setattr__(self, "predictors", specs)

    def level_specs(self) -> list[LevelSpec]:
        if self.predictors is not None:
            return list(self.predictors)
        return [LevelSpec(self.widths, self.kernel)] * self.levels

    def level_sizes(self) -> list[tuple[int, int]]:
        return pyramid_sizes(self.height, self.width, self.levels)

    def validate(self) -> "PyramidConfig":
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        self.level_sizes()
        specs = self.level_specs()
        if len(specs) != self.levels:
            raise ConfigError(f"{len(specs)} predictor specs given for {self.levels} levels")
        for spec in specs:
            spec.validate()
        return self

    def to_dict(self) -> dict:
        out = {
            "levels": self.levels,
            "height": self.height,
            "width": self.width,
            "widths": list(self.widths),
            "kernel": self.kernel,
            "seed": self.seed,
        }
        if self.predictors is not None:
            out["predictors"] = [{"widths": list(p.widths), "kernel": p.kernel} for p in self.predictors]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PyramidConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("predictors") is not None:
            specs = []
            for p in data["predictors"]:
                extra = set(p) - {"widths", "kernel"}
                if extra:
                    raise ConfigError(f"unknown predictor keys: {sorted(extra)}")
                specs.append(LevelSpec(**p))
            data["predictors"] = tuple(specs)
        return cls(**data)


def pyramid_sizes(h: int, w: int, levels: int) -> list[tuple[int, int]]:
    """Resolutions of a ``levels``-deep pyramid under ceiling halving."""
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    sizes = [(h, w)]
    for _ in range(levels - 1):
        h, w = (h + 1) // 2, (w + 1) // 2
        sizes.append((h, w))
    if min(sizes[-1]) < MIN_COARSE:
        raise ConfigError(
            f"{levels} levels on {sizes[0][0]}x{sizes[0][1]} leave a {h}x{w} coarsest level "
            f"(minimum {MIN_COARSE}x{MIN_COARSE})"
        )
    return sizes


@dataclass(eq=False)
class PyramidNet:
    config: PyramidConfig
    nets: list[list[ConvLayer]] = field(default_factory=list)  # index 0 = finest

    @property
    def levels(self) -> int:
        return len(self.nets)

    def layers(self):
        """All layers in checkpoint order: coarsest level first."""
        for level in reversed(self.nets):
            yield from level

    def copy(self) -> "PyramidNet":
        return PyramidNet(
            self.config,
            [[ConvLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in level] for level in self.nets],
        )


def same_layout(a: list[ConvLayer], b: list[ConvLayer]) -> bool:
    return len(a) == len(b) and all(
        x.weight.shape == y.weight.shape and x.activation == y.activation for x, y in zip(a, b)
    )


def _check_chain(layers: list[ConvLayer]) -> None:
    for a, b in zip(layers, layers[1:]):
        if a.out_channels != b.in_channels:
            raise ConfigError(f"layer emits {a.out_channels} channels but next layer takes {b.in_channels}")


def init_net(config: PyramidConfig) -> PyramidNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, seeded."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    nets = []
    for spec in config.level_specs():
        k = spec.kernel
        layers = []
        pairs = list(zip(spec.widths[:-1], spec.widths[1:]))
        for i, (cin, cout) in enumerate(pairs):
            bound = 1.0 / np.sqrt(cin * k * k)
            weight = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(DTYPE)
            act = "none" if i == len(pairs) - 1 else "relu"
            layers.append(ConvLayer(weight, np.zeros(cout, DTYPE), act))
        nets.append(layers)
    return PyramidNet(config, nets)


def net_from_layers(config: PyramidConfig, nets: list[list[ConvLayer]]) -> PyramidNet:
    """Assemble a net from explicit layers, checking them against ``config``."""
    config.validate()
    specs = config.level_specs()
    if len(nets) != len(specs):
        raise ConfigError(f"{len(nets)} levels of layers for a {len(specs)}-level config")
    for spec, layers in zip(specs, nets):
        _check_chain(layers)
        widths = (layers[0].in_channels,) + tuple(l.out_channels for l in layers) if layers else ()
        if widths != spec.widths or any(l.k != spec.kernel for l in layers):
            raise ConfigError(f"layers {widths} do not match predictor spec {spec.widths}/k={spec.kernel}")
    return PyramidNet(config, nets)


def count_params(net: PyramidNet) -> int:
    return sum(layer.n_params for level in net.nets for layer in level)


def level_layout(net: PyramidNet) -> list[LevelSpec]:
    """Per-level (widths, kernel) read off the actual layers, finest first."""
    out = []
    for layers in net.nets:
        _check_chain(layers)
        widths = (layers[0].in_channels,) + tuple(l.out_channels for l in layers)
        out.append(LevelSpec(widths, layers[0].k))
    return out


def checkpoint_size_bytes(net: PyramidNet) -> int:
    """Exact length of the checkpoint file ``save_checkpoint`` writes for ``net``."""
    from .checkpoint import encoded_size

    return encoded_size(level_layout(net), count_params(net))


# ---------------------------------------------------------------------------
# pyramid plumbing


def build_pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """[image, downsampled once, ...]; accepts (C,H,W) or (N,C,H,W)."""
    h, w = np.shape(image)[-2:]
    pyramid_sizes(h, w, levels)
    out = [np.asarray(image, dtype=DTYPE)]
    for _ in range(levels - 1):
        out.append(T.avg_downsample2x(out[-1]))
    return out


def normalize_images(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] images to the zero-centered range every level sees."""
    return (np.asarray(images, dtype=DTYPE) - DTYPE(IMAGE_MEAN)) * DTYPE(IMAGE_SCALE)


def level_input(img1: np.ndarray, img2: np.ndarray, flow_up: np.ndarray) -> np.ndarray:
    """Stack [img1 | warp(img2, flow_up) | flow_up] along channels."""
    a, squeeze = T._batched(img1)
    b, _ = T._batched(img2)
    f, _ = T._batched(flow_up)
    if a.shape != b.shape or a.shape[1] != 3 or f.shape != (a.shape[0], 2) + a.shape[2:]:
        raise ConfigError(f"level input shapes disagree: {a.shape}, {b.shape}, {f.shape}")
    warped, _ = T._warp_forward(b.astype(DTYPE, copy=False), f.astype(DTYPE, copy=False))
    out = np.concatenate([a, warped, f], axis=1).astype(DTYPE, copy=False)
    return T._unbatch(out, squeeze)


def predictor_forward(layers: list[ConvLayer], x: np.ndarray, keep: bool = False):
    """Run one level's conv stack on (N, C, H, W); returns (output, ctxs)."""
    a = T.to_spatial_major(x)
    ctxs = []
    for layer in layers:
        a, ctx = T._conv_forward(a, layer, keep=keep)
        ctxs.append(ctx)
    return T.from_spatial_major(a), ctxs


def predictor_backward(layers: list[ConvLayer], ctxs, grad_out: np.ndarray, need_input: bool = False):
    """Backprop through one level; returns ([(grad_w, grad_b), ...], grad_input or None)."""
    g = T.to_spatial_major(grad_out)
    grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        g, gw, gb = T._conv_backward(ctxs[i], layers[i], g, need_input=need_input or i > 0)
        grads[i] = (gw, gb)
    grad_in = T.from_spatial_major(g) if need_input else None
    return grads, grad_in


def upsample_flow(flow: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize a coarser flow to (h, w) and double its displacements."""
    return T.bilinear_upsample2x(flow, h, w) * DTYPE(2)


class ForwardCache:
    __slots__ = ("pyr1", "pyr2", "flow_up", "warp_ctx", "conv_ctx", "squeeze")


def forward(net: PyramidNet, img1: np.ndarray, img2: np.ndarray, keep: bool = False):
    """Estimate flow at every level; returns (flows finest-first, cache or None).

    Inputs may be single (3, H, W) images or batches (N, 3, H, W).
    """
    a, squeeze = T._batched(img1)
    b, _ = T._batched(img2)
    cfg = net.config
    if a.shape != b.shape or a.shape[1:] != (3, cfg.height, cfg.width):
        raise ConfigError(
            f"images {a.shape[1:]} / {b.shape[1:]} do not match the configured 3x{cfg.height}x{cfg.width}"
        )
    k = net.levels
    pyr1 = build_pyramid(normalize_images(a), k)
    pyr2 = build_pyramid(normalize_images(b), k)
    flows: list[np.ndarray | None] = [None] * k
    cache = ForwardCache() if keep else None
    if keep:
        cache.pyr1, cache.pyr2, cache.squeeze = pyr1, pyr2, squeeze
        cache.flow_up, cache.warp_ctx, cache.conv_ctx = [None] * k, [None] * k, [None] * k
    n = a.shape[0]
    for lvl in reversed(range(k)):
        h, w = pyr1[lvl].shape[2:]
        if lvl == k - 1:
            flow_up = np.zeros((n, 2, h, w), DTYPE)
        else:
            flow_up = upsample_flow(flows[lvl + 1], h, w)
        warped, wctx = T._warp_forward(pyr2[lvl], flow_up, keep=keep)
        x = np.concatenate([pyr1[lvl], warped, flow_up], axis=1)
        residual, cctx = predictor_forward(net.nets[lvl], x, keep=keep)
        flows[lvl] = flow_up + residual
        if keep:
            cache.flow_up[lvl], cache.warp_ctx[lvl], cache.conv_ctx[lvl] = flow_up, wctx, cctx
    if squeeze:
        flows = [f[0] for f in flows]
    return flows, cache


def backward(net: PyramidNet, cache: ForwardCache, grad_flows: list[np.ndarray | None]):
    """Gradients of a loss on the returned flows w.r.t. every level's weights.

    ``grad_flows[l]`` is dLoss/dflow_l (or None). Returns per-level lists of
    (grad_w, grad_b), index 0 = finest.
    """
    k = net.levels
    if len(grad_flows) != k:
        raise ConfigError(f"expected {k} flow gradients, got {len(grad_flows)}")
    pending: list[np.ndarray | None] = [None] * k
    for lvl, g in enumerate(grad_flows):
        if g is not None:
            g = np.asarray(g, dtype=DTYPE)
            pending[lvl] = g[None] if cache.squeeze else g
    out = [None] * k
    for lvl in range(k):
        g = pending[lvl]
        if g is None:
            n = cache.pyr1[lvl].shape[0]
            g = np.zeros((n, 2) + cache.pyr1[lvl].shape[2:], DTYPE)
        coarsest = lvl == k - 1
        grads, g_in = predictor_backward(net.nets[lvl], cache.conv_ctx[lvl], g, need_input=not coarsest)
        out[lvl] = grads
        if coarsest:
            continue
        _, g_warp_flow = T._warp_backward(cache.warp_ctx[lvl], cache.pyr2[lvl], g_in[:, 3:6], need_image=False)
        g_up = g + g_in[:, 6:8] + g_warp_flow
        h, w = cache.pyr1[lvl + 1].shape[2:]
        g_coarse = T.bilinear_upsample2x_backward(g_up, h, w) * DTYPE(2)
        pending[lvl + 1] = g_coarse if pending[lvl + 1] is None else pending[lvl + 1] + g_coarse
    return out
