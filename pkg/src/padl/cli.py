"""Command-line entry point: gen, train, eval, mimic, gradcheck, report.

Each command takes an optional JSON config (``--config``) plus dotted
``--set key=value`` overrides, and writes the merged config as
``config.json`` into its output directory.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfg
from . import dataio
from .errors import (
    ConfigurationError,
    CorruptionError,
    DataError,
    DatasetIOError,
    DegenerateUnionError,
    DeterminismError,
    DimensionError,
    DivergenceError,
    FormatError,
    GeometryError,
    VersionError,
)
from .synthdata import AnnotatorProfile, SceneSpec, default_profiles, gen_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("padl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class GenConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    profiles: list = field(default_factory=lambda: [asdict(p) for p in default_profiles()])
    n_train: int = 200
    n_test: int = 50


@dataclass
class EvalConfig:
    split: str = "test"
    dump_probs: bool = False
    eval_batch_stats: bool = False


def _merged(cls, args) -> object:
    data = cfg.to_dict(cls())
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DatasetIOError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {args.config} is not valid JSON: {exc}") from exc
        data = cfg.to_dict(cfg.from_dict(cls, _deep_merge(data, loaded)))
    data = cfg.apply_overrides(data, args.set)
    return cfg.from_dict(cls, data)


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _echo_config(out: Path, conf) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(conf), indent=2) + "\n")


# -- commands ------------------------------------------------------------------------
def cmd_gen(args) -> int:
    conf = _merged(GenConfig, args)
    profiles = [AnnotatorProfile(**p) for p in conf.profiles]
    out = Path(args.out)
    manifest = gen_dataset(conf.scene, profiles, conf.n_train, conf.n_test, out)
    _echo_config(out, conf)
    print(f"wrote {len(manifest.samples)} samples with {manifest.annotator_count} annotators to {out}")
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig

    if args.mode:
        args.set = [f'model.mode="{args.mode}"'] + list(args.set)
    if args.detach_mu:
        args.set = ["model.detach_mu=true"] + list(args.set)
    return _merged(TrainConfig, args)


def cmd_train(args) -> int:
    from .trainer import train

    manifest = dataio.read_manifest(args.data)
    args.set = [f"model.hpm.annotator_count={manifest.annotator_count}", *args.set]
    conf = _train_config(args)
    samples = dataio.load_dataset(args.data, "train")
    out = Path(args.out)
    result = train(
        conf,
        samples,
        out_dir=out,
        resume=args.resume,
        stop_after_epoch=args.stop_after,
        extra_header={"normalization": manifest.normalization, "data": str(Path(args.data).resolve())},
    )
    last = result.loss_log[-1]["total"] if result.loss_log else float("nan")
    print(f"trained {result.epoch} epochs; final loss {last:.4f}; checkpoint {out / 'checkpoint.padl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_prediction, load_model, predict, stack_samples

    conf = _merged(EvalConfig, args)
    params, train_conf, _ = load_model(args.checkpoint)
    train_conf.eval_batch_stats = conf.eval_batch_stats
    samples = dataio.load_dataset(args.data, conf.split)
    if not samples:
        raise DataError(f"split {conf.split!r} is empty")
    x, _ = stack_samples(samples)
    pred = predict(params, train_conf, x)
    report = evaluate_prediction(pred, samples)
    out = Path(args.out)
    _echo_config(out, conf)
    (out / "report.json").write_text(report.to_json() + "\n")
    if conf.dump_probs:
        probs = out / "probs"
        probs.mkdir(exist_ok=True)
        for i, s in enumerate(samples):
            dataio.write_pgm(probs / f"{s.sample_id}_meta.pgm", dataio.quantize_probability(pred.meta_prob[i, 0]))
            if pred.head_probs is not None:
                for r in range(pred.head_probs.shape[0]):
                    dataio.write_pgm(
                        probs / f"{s.sample_id}_a{r + 1}.pgm", dataio.quantize_probability(pred.head_probs[r, i, 0])
                    )
    print(f"average {report.average:.2f}  mean voting {report.mean_voting:.2f}  -> {out / 'report.json'}")
    return EXIT_OK


def cmd_mimic(args) -> int:
    from .trainer import load_model, predict

    params, conf, ckpt = load_model(args.checkpoint)
    if not conf.model.has_heads:
        raise ConfigurationError(f"checkpoint was trained in mode {conf.model.mode!r} without per-annotator heads")
    norm = ckpt.header.get("normalization")
    if norm is None:
        raise DataError("checkpoint carries no normalization statistics")
    r_count = conf.model.annotator_count
    annotators = [args.annotator] if args.annotator else list(range(1, r_count + 1))
    for a in annotators:
        if not 1 <= a <= r_count:
            raise UsageError(f"--annotator must lie in 1..{r_count}, got {a}")
    out = Path(args.out)
    _echo_config(out, conf)
    for image in args.image:
        raster = dataio.read_pgm(image).astype(np.float64)
        x = ((raster - norm["mean"]) / norm["std"]).astype(np.float32)[None, None]
        pred = predict(params, conf, x, batch_size=1)
        stem = Path(image).stem
        for a in annotators:
            path = out / f"{stem}_a{a}.pgm"
            dataio.write_pgm(path, dataio.quantize_probability(pred.head_probs[a - 1, 0, 0]))
            print(path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import model_gradcheck

    report = model_gradcheck(seed=args.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"seed": args.seed}, indent=2) + "\n")
        (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    for name, err in report.worst(5):
        print(f"{name:40s} {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_error:.3e} (threshold {report.threshold:g})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def svg_line_chart(series: dict[str, Sequence[float]], title: str, width: int = 640, height: int = 360) -> str:
    """Minimal SVG line chart, one polyline per series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad = 48
    values = [v for ys in series.values() for v in ys]
    longest = max((len(ys) for ys in series.values()), default=1)
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0

    def px(i, v):
        x = pad + (width - 2 * pad) * (i / max(longest - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{hi:.3g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-family="sans-serif" font-size="10">{lo:.3g}</text>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="11">step</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        color = colors[k % len(colors)]
        points = " ".join(px(i, v) for i, v in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        parts.append(
            f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" fill="{color}" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    rows, curves = [], {}
    for run in args.runs:
        run = Path(run)
        row = {"run": run.name}
        report_path = run / "report.json"
        if report_path.exists():
            rep = json.loads(report_path.read_text())
            row.update(
                average=rep["average"],
                mean_voting=rep["mean_voting"],
                **{f"annotator_{r['annotator']}": r["dice"] for r in rep["per_annotator"]},
            )
        log_path = run / "loss_log.jsonl"
        if log_path.exists():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            curves[run.name] = [rec["total"] for rec in records]
            row["final_loss"] = curves[run.name][-1] if records else None
        if len(row) == 1:
            raise DataError(f"{run} holds neither report.json nor loss_log.jsonl")
        rows.append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"runs": [str(r) for r in args.runs]}, indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    columns = sorted({k for row in rows for k in row} - {"run"})
    lines = ["| run | " + " | ".join(columns) + " |", "|---" * (len(columns) + 1) + "|"]
    for row in rows:
        cells = [f"{row[c]:.2f}" if isinstance(row.get(c), float) else str(row.get(c, "")) for c in columns]
        lines.append(f"| {row['run']} | " + " | ".join(cells) + " |")
    table = "\n".join(lines) + "\n"
    (out / "summary.md").write_text(table)
    if curves:
        (out / "loss_curves.svg").write_text(svg_line_chart(curves, "total loss per step"))
    print(table, end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="padl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)
    sub.required = True

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic multi-annotator dataset")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["padl", "mv", "ls", "mh"])
    p.add_argument("--detach-mu", action="store_true", help="stop preference-head gradients at mu")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this epoch (resumable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mimic", help="write per-annotator probability maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--annotator", type=int, help="1-based annotator index (default: all)")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_mimic)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="tabulate runs and plot their loss curves")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, DeterminismError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError,
        DatasetIOError,
        FormatError,
        VersionError,
        CorruptionError,
        GeometryError,
        DegenerateUnionError,
        DimensionError,
        OSError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
