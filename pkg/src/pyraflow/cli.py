"""Command-line entry point: gen, train, infer, eval, bench, viz.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numeric failure. Every error prints one ``error: <kind>: <detail>`` line
on stderr; progress goes to stderr and results to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import evalbench as E
from . import flowio
from . import model as M
from . import synth as S
from . import tensor as T
from . import train as TR
from .errors import ConfigError, FormatError, NumericError, PyraflowError

log = logging.getLogger("pyraflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class EvalConfig:
    max_samples: int | None = None  # evaluate only the first N samples

    def validate(self) -> "EvalConfig":
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigError("eval.max_samples must be >= 1")
        return self


@dataclass
class BenchConfig:
    warmup: int = 3
    iters: int = 20
    height: int | None = None  # None: the checkpoint's own resolution
    width: int | None = None
    parallel: bool = False
    seed: int = 0

    def validate(self) -> "BenchConfig":
        if self.iters < 1 or self.warmup < 0:
            raise ConfigError("bench needs iters >= 1 and warmup >= 0")
        if (self.height is None) != (self.width is None):
            raise ConfigError("bench.height and bench.width must be given together")
        return self


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(data)
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class CliConfig:
    gen: S.GenConfig = field(default_factory=S.GenConfig)
    model: M.PyramidConfig = field(default_factory=M.PyramidConfig)
    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, doc) -> "CliConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        kinds = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(doc) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(**{name: _section(kinds[name], value, name) for name, value in doc.items()})
            for f in fields(cls):
                getattr(cfg, f.name).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cfg

    def to_dict(self) -> dict:
        return {
            "gen": self.gen.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "bench": asdict(self.bench),
        }


def load_config(path) -> CliConfig:
    if path is None:
        return CliConfig.from_dict({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return CliConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# subcommands


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    out = S.generate_dataset(cfg.gen, args.out)
    log.info("wrote %d samples to %s", cfg.gen.count, out)
    _emit({"out": str(out), "samples": cfg.gen.count, "seed": cfg.gen.seed})
    return EXIT_OK


def size_report(net: M.PyramidNet) -> tuple[int, int, str]:
    """(parameters, checkpoint bytes, printable line with the reference sizes)."""
    n = M.count_params(net)
    size = M.checkpoint_size_bytes(net)
    line = (
        f"parameters: {n} (reference full-size model: {TR.REFERENCE_PARAMS / 1e6:g} M); "
        f"checkpoint bytes: {size} (reference: {TR.REFERENCE_BYTES / 1e6:g} MB)"
    )
    return n, size, line


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = S.load_dataset(args.data)
    if not data:
        raise ConfigError(f"dataset {args.data} has no samples")
    net = M.init_net(cfg.model)
    _, _, line = size_report(net)
    print(line, file=sys.stderr, flush=True)
    sink = open(args.history, "w") if args.history else sys.stdout
    try:
        def on_epoch(rec):
            print(json.dumps(rec, sort_keys=True), file=sink, flush=True)

        trained, history = TR.train(net, data, cfg.train, on_epoch=on_epoch)
    finally:
        if sink is not sys.stdout:
            sink.close()
    last = history[-1] if history else {}
    meta = C.CheckpointMeta(
        epoch=int(last.get("epoch", 0)),
        level=int(last.get("level", -1)),
        train_loss=float(last.get("train_loss", float("nan"))),
        val_epe=float(last.get("val_epe", float("nan"))),
    )
    C.save_checkpoint(trained, meta, args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = C.load_checkpoint(args.ckpt)
    img1 = flowio.read_ppm(args.img1)
    img2 = flowio.read_ppm(args.img2)
    flow = E.predict_pair(ckpt.net, img1, img2)
    flowio.write_flo(flow, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    data = S.load_dataset(args.data)
    if cfg.eval.max_samples is not None:
        data = data[: cfg.eval.max_samples]
    source = C.load_checkpoint(args.ckpt).net if args.ckpt else Path(args.pred)
    report = E.evaluate(source, data)
    baseline = E.zero_flow_baseline(data)
    if args.csv:
        E.write_csv(report, args.csv)
    out = report.to_dict()
    out["zero_flow_baseline"] = baseline.mean
    out["ratio_to_baseline"] = report.mean / baseline.mean if baseline.mean > 0 else None
    log.info("mean EPE %.4f px over %d samples (zero-flow baseline %.4f px)", report.mean, report.samples, baseline.mean)
    _emit(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    b = cfg.bench
    warmup = b.warmup if args.warmup is None else args.warmup
    iters = b.iters if args.iters is None else args.iters
    net = C.load_checkpoint(args.ckpt).net
    resolution = (b.height, b.width) if b.height is not None else None
    report = E.bench_inference(
        net, resolution, warmup=warmup, iters=iters,
        parallel=args.parallel or b.parallel, seed=b.seed, stream=sys.stderr,
    )
    _emit(report.to_dict())
    return EXIT_OK


def cmd_viz(args) -> int:
    flow = flowio.read_flo(args.flo)
    rgb = flowio.flow_to_color(flow, args.max_norm)
    flowio.write_ppm(rgb.astype(np.float64) / 255.0, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pyraflow", description="Spatial-pyramid optical flow: data, training, evaluation.")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON config (section 'gen')")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a pyramid net; history as JSON lines")
    t.add_argument("--config", help="JSON config (sections 'model', 'train')")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="write history JSON lines here instead of stdout")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate flow for one image pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--img1", required=True, help="frame 1 (PPM)")
    i.add_argument("--img2", required=True, help="frame 2 (PPM)")
    i.add_argument("--out", required=True, help="output .flo")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="EPE report as JSON")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="evaluate a checkpoint")
    src.add_argument("--pred", help="directory of NNNNNN_pred.flo predictions")
    e.add_argument("--data", required=True)
    e.add_argument("--csv", help="per-sample EPE table")
    e.add_argument("--config", help="JSON config (section 'eval')")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference latency")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--warmup", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--parallel", action="store_true", help="allow internal parallelism")
    b.add_argument("--config", help="JSON config (section 'bench')")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz", help="color-wheel rendering of a .flo")
    v.add_argument("--flo", required=True)
    v.add_argument("--out", required=True, help="output PPM")
    v.add_argument("--max-norm", type=float, default=None, help="saturation magnitude (default: auto)")
    v.set_defaults(func=cmd_viz)
    return p


def _fail(kind: str, detail: str) -> None:
    print(f"error: {kind}: {' '.join(str(detail).split())}", file=sys.stderr, flush=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        _fail("usage", exc)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        T.set_threads(T.get_threads())
        return args.func(args)
    except ConfigError as exc:
        _fail(exc.kind, exc)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        kind = exc.kind if isinstance(exc, PyraflowError) else "io"
        _fail(kind, exc)
        return EXIT_DATA
    except NumericError as exc:
        _fail(exc.kind, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
