"""End-point-error evaluation and the inference latency benchmark."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flowio
from . import model as M
from . import tensor as T
from .errors import ConfigError, MissingPredictionError, NumericError, ResolutionError
from .model import PyramidNet
from .synth import Sample
from .tensor import DTYPE

OUTLIER_PX = 3.0

# published timing of the full-size model on its authors' hardware
REFERENCE_MS = 31.0
REFERENCE_FPS = 32.0


@dataclass
class EpeReport:
    """Pixel-pooled EPE statistics over every valid pixel of a dataset."""

    mean: float
    median: float
    outlier_fraction: float
    per_segment: dict[int, float]  # segment id -> mean EPE, -1 = background
    segment_pixels: dict[int, int]
    samples: int
    pixels: int
    per_sample: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "mean_epe": self.mean,
            "median_epe": self.median,
            "outlier_fraction": self.outlier_fraction,
            "outlier_threshold_px": OUTLIER_PX,
            "per_segment": {str(k): v for k, v in sorted(self.per_segment.items())},
            "segment_pixels": {str(k): v for k, v in sorted(self.segment_pixels.items())},
            "samples": self.samples,
            "pixels": self.pixels,
        }


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean error between two (2, H, W) flows, in float64."""
    d = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    return np.sqrt(d[0] * d[0] + d[1] * d[1])


def _sample_id(sample: Sample, position: int) -> int:
    return int(sample.meta.get("index", position))


def prediction_name(sample_id: int) -> str:
    return f"{sample_id:06d}_pred.flo"


def predict_pair(net: PyramidNet, img1: np.ndarray, img2: np.ndarray) -> np.ndarray:
    """Finest-level flow for one pair, always evaluated as a batch of one.

    Every code path that produces predictions goes through here so live
    evaluation and dumped ``.flo`` files hold the same bits.
    """
    cfg = net.config
    if img1.shape != (3, cfg.height, cfg.width) or img2.shape != img1.shape:
        raise ResolutionError(
            f"images are {img1.shape[1:]} / {img2.shape[1:]}, model expects 3x{cfg.height}x{cfg.width}"
        )
    flows, _ = M.forward(net, img1, img2)
    if not np.all(np.isfinite(flows[0])):
        raise NumericError("model produced non-finite flow")
    return flows[0]


def predict_sample(net: PyramidNet, sample: Sample) -> np.ndarray:
    return predict_pair(net, sample.image1, sample.image2)


def load_prediction(pred_dir, sample: Sample, position: int) -> np.ndarray:
    path = Path(pred_dir) / prediction_name(_sample_id(sample, position))
    if not path.is_file():
        raise MissingPredictionError(f"no prediction for sample {_sample_id(sample, position)}: {path}")
    flow = flowio.read_flo(path)
    if flow.shape != sample.gt_flow.shape:
        raise ResolutionError(
            f"{path} is {flow.shape[1]}x{flow.shape[2]}, ground truth is "
            f"{sample.gt_flow.shape[1]}x{sample.gt_flow.shape[2]}"
        )
    return flow


def dump_predictions(net: PyramidNet, dataset: list[Sample], out_dir) -> list[Path]:
    """Write one ``.flo`` prediction per sample; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, sample in enumerate(dataset):
        path = out_dir / prediction_name(_sample_id(sample, i))
        flowio.write_flo(predict_sample(net, sample), path)
        paths.append(path)
    return paths


def report_from_predictions(dataset: list[Sample], predictions) -> EpeReport:
    """Aggregate EPE over ``dataset`` given an iterable of matching predictions."""
    errors, segs, per_sample = [], [], []
    for i, (sample, pred) in enumerate(zip(dataset, predictions)):
        if pred.shape != sample.gt_flow.shape:
            raise ResolutionError(f"prediction {pred.shape} vs ground truth {sample.gt_flow.shape}")
        if not np.all(np.isfinite(pred)):
            raise NumericError(f"prediction for sample {_sample_id(sample, i)} is not finite")
        valid = sample.valid_mask[0] > 0
        e = epe_map(pred, sample.gt_flow)[valid]
        errors.append(e)
        segs.append(np.asarray(sample.segment_map)[valid])
        per_sample.append({
            "id": _sample_id(sample, i),
            "mean_epe": float(e.mean()) if e.size else math.nan,
            "median_epe": float(np.median(e)) if e.size else math.nan,
            "outlier_fraction": float((e > OUTLIER_PX).mean()) if e.size else math.nan,
            "valid_pixels": int(e.size),
        })
    if len(per_sample) != len(dataset):
        raise MissingPredictionError(f"{len(per_sample)} predictions for {len(dataset)} samples")
    e = np.concatenate(errors)
    s = np.concatenate(segs)
    if e.size == 0:
        raise ConfigError("no valid pixels in the dataset; EPE is undefined")
    per_segment, segment_pixels = {}, {}
    for seg_id in np.unique(s):
        sel = e[s == seg_id]
        per_segment[int(seg_id)] = float(sel.mean())
        segment_pixels[int(seg_id)] = int(sel.size)
    return EpeReport(
        mean=float(e.mean()),
        median=float(np.median(e)),
        outlier_fraction=float((e > OUTLIER_PX).mean()),
        per_segment=per_segment,
        segment_pixels=segment_pixels,
        samples=len(dataset),
        pixels=int(e.size),
        per_sample=per_sample,
    )


def evaluate(source, dataset: list[Sample]) -> EpeReport:
    """EPE of a live ``PyramidNet`` or of a directory of ``.flo`` predictions."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    if isinstance(source, PyramidNet):
        preds = (predict_sample(source, s) for s in dataset)
    else:
        if not Path(source).is_dir():
            raise MissingPredictionError(f"prediction directory {source} does not exist")
        preds = (load_prediction(source, s, i) for i, s in enumerate(dataset))
    return report_from_predictions(dataset, preds)


def zero_flow_baseline(dataset: list[Sample]) -> EpeReport:
    if not dataset:
        raise ConfigError("zero-flow baseline of an empty dataset is undefined")
    return report_from_predictions(dataset, (np.zeros_like(s.gt_flow, dtype=DTYPE) for s in dataset))


CSV_FIELDS = ("id", "mean_epe", "median_epe", "outlier_fraction", "valid_pixels")


def write_csv(report: EpeReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in report.per_sample:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# latency


@dataclass
class BenchReport:
    height: int
    width: int
    warmup: int
    iters: int
    threads: int
    parallel: bool
    mean_ms: float
    p50_ms: float
    p95_ms: float
    fps: float
    times_ms: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "resolution": [self.height, self.width],
            "warmup": self.warmup,
            "iters": self.iters,
            "threads": self.threads,
            "parallel": self.parallel,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "fps": self.fps,
            "reference_ms": REFERENCE_MS,
            "reference_fps": REFERENCE_FPS,
        }

    def summary(self) -> str:
        return (
            f"measured {self.height}x{self.width}, {'parallel' if self.parallel else 'single-threaded'} "
            f"({self.threads} thread(s)), {self.iters} iters "
            f"after {self.warmup} warmup: mean {self.mean_ms:.3f} ms/frame "
            f"(p50 {self.p50_ms:.3f}, p95 {self.p95_ms:.3f}), {self.fps:.1f} fps\n"
            f"reference (full-size model on other hardware; hardware-dependent, not asserted): "
            f"{REFERENCE_MS:g} ms/frame, {REFERENCE_FPS:g} fps"
        )


def net_at_resolution(net: PyramidNet, height: int, width: int) -> PyramidNet:
    """Same weights, different input size (the predictors are fully convolutional)."""
    if (height, width) == (net.config.height, net.config.width):
        return net
    cfg = replace(net.config, height=height, width=width).validate()
    return PyramidNet(cfg, net.nets)


def bench_inference(net: PyramidNet, resolution=None, warmup: int = 3, iters: int = 20,
                    parallel: bool = False, seed: int = 0, stream=None) -> BenchReport:
    """Time ``forward`` on a fixed random pair; only the forward call is inside the timer.

    Single-threaded unless ``parallel``; ``stream`` receives a printed summary.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    h, w = resolution or (net.config.height, net.config.width)
    net = net_at_resolution(net, int(h), int(w))
    rng = np.random.default_rng(seed)
    img1 = rng.random((3, h, w), dtype=DTYPE)
    img2 = rng.random((3, h, w), dtype=DTYPE)
    threads = T._default_threads() if parallel else 1
    previous = T.get_threads()
    T.set_threads(threads)
    try:
        for _ in range(warmup):
            M.forward(net, img1, img2)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            M.forward(net, img1, img2)
            times.append((time.perf_counter() - t0) * 1000.0)
    finally:
        T.set_threads(previous)
    arr = np.asarray(times)
    mean = float(arr.mean())
    report = BenchReport(
        height=int(h),
        width=int(w),
        warmup=warmup,
        iters=iters,
        threads=threads,
        parallel=parallel,
        mean_ms=mean,
        p50_ms=float(np.percentile(arr, 50)),
        p95_ms=float(np.percentile(arr, 95)),
        fps=1000.0 / mean,
        times_ms=times,
    )
    if stream is not None:
        print(report.summary(), file=stream)
    return report
