"""Adam with polynomial learning-rate decay, the per-mode losses, training and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfg
from . import dataio
from .autodiff import Tensor
from .errors import ConfigurationError, DivergenceError, ScheduleError
from .metrics import (
    EvaluationReport,
    aggregate_reports,
    dataset_preference_rank,
    evaluate,
    mean_voting,
)
from .model import ModelConfig, build_model, model_forward
from .params import ParameterSet
from .sampling import LossBreakdown, bce_loss, gaussian_sample, select_annotations, total_loss
from .synthdata import AnnotatedSample, contour_distance

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr0: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    mc_samples: int = 1
    eval_interval: int = 0
    eval_batch_stats: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.model.backbone.batch_norm and self.batch_size < 2:
            raise ConfigurationError("batch normalization needs batch_size >= 2")
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be >= 1")

    def to_dict(self) -> dict:
        return cfg.to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cfg.from_dict(cls, d)


def poly_lr(lr0: float, t: float, T: float, power: float = 0.9) -> float:
    """``lr0 * (1 - t/T) ** power`` for epoch ``t`` of ``T``."""
    if T <= 0 or t < 0 or t > T:
        raise ScheduleError(f"epoch {t} outside [0, {T}]")
    return lr0 * (1.0 - t / T) ** power


class Adam:
    """Bias-corrected Adam; parameters are visited in sorted name order."""

    def __init__(self, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for name in sorted(self.params.names()):
            g = self.params[name].grad
            if g is not None and not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name in sorted(self.params.names()):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{n}": a for n, a in self.m.items()}
        out.update({f"adam.v/{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], steps: int) -> None:
        for n in self.m:
            self.m[n][...] = arrays[f"adam.m/{n}"]
            self.v[n][...] = arrays[f"adam.v/{n}"]
        self.steps = steps


def adam_step(params: ParameterSet, state: Adam, lr: float) -> None:
    state.step(lr)


# -- data plumbing ---------------------------------------------------------------
def stack_samples(samples: Sequence[AnnotatedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Images N x C x H x W and annotations R x N x K x H x W."""
    x = np.stack([s.x for s in samples]).astype(np.float32)
    y = np.stack([np.stack(s.y) for s in samples], axis=1)
    return x, y


def _run_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def compute_loss(
    config: TrainConfig,
    out,
    y: np.ndarray,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Loss for one batch; ``y`` holds the annotations as R x N x K x H x W."""
    mode = config.model.mode
    dtype = out.prob.dtype
    annotations = [a.astype(dtype) for a in y]
    n = y.shape[1]
    if mode == "mv":
        target = y.astype(dtype).mean(axis=0)
        loss = bce_loss(target, out.prob)
        return LossBreakdown(loss, float(loss.data))
    if mode == "ls":
        idx = select_annotations(n, y.shape[0], rng)
        loss = bce_loss(y[idx, np.arange(n)].astype(dtype), out.prob)
        return LossBreakdown(loss, float(loss.data), [], idx.tolist())
    if mode == "mh":
        return total_loss(None, None, [h.prob_r for h in out.heads], annotations)

    idx = select_annotations(n, y.shape[0], rng)
    y_s = y[idx, np.arange(n)].astype(dtype)
    draws = []
    for _ in range(config.mc_samples):
        meta = gaussian_sample(out.mu, out.sigma, rng).prob_sample if out.sigma is not None else out.prob
        prefs = [
            gaussian_sample(h.mu_r, h.sigma_r, rng).prob_sample if h.sigma_r is not None else h.prob_r
            for h in out.heads
        ]
        draws.append(total_loss(meta, y_s, prefs, annotations, idx.tolist()))
    if len(draws) == 1:
        return draws[0]
    loss = draws[0].loss
    for d in draws[1:]:
        loss = loss + d.loss
    loss = loss * (1.0 / len(draws))
    return LossBreakdown(
        loss,
        float(np.mean([d.l_meta for d in draws])),
        np.mean([d.l_pref for d in draws], axis=0).tolist() if draws[0].l_pref else [],
        idx.tolist(),
    )


# -- training -------------------------------------------------------------------------
@dataclass
class TrainResult:
    params: ParameterSet
    config: TrainConfig
    loss_log: list[dict]
    optimizer: Adam
    epoch: int
    evaluations: list[dict] = field(default_factory=list)


def checkpoint_arrays(params: ParameterSet, opt: Adam) -> dict[str, np.ndarray]:
    arrays = params.state()
    arrays.update(opt.state())
    return arrays


def save_training_state(path, result_params, opt, config, epoch, rng, extra=None) -> None:
    header = {
        "train_config": config.to_dict(),
        "epoch": epoch,
        "schedule": {
            "t": epoch,
            "T": config.epochs,
            "lr0": config.lr0,
            "lr": poly_lr(config.lr0, epoch, config.epochs),
        },
        "adam_steps": opt.steps,
        "seed": config.seed,
        "rng_state": rng.bit_generator.state,
        "parameter_names": result_params.names(),
    }
    header.update(extra or {})
    dataio.save_checkpoint(path, checkpoint_arrays(result_params, opt), header)


def load_model(path) -> tuple[ParameterSet, TrainConfig, dataio.Checkpoint]:
    ckpt = dataio.load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.header["train_config"])
    params = build_model(config.model, config.seed)
    params.load_state({k: v for k, v in ckpt.arrays.items() if k.startswith(("param/", "buffer/"))})
    return params, config, ckpt


def train(
    config: TrainConfig,
    samples: Sequence[AnnotatedSample],
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
    eval_samples: Sequence[AnnotatedSample] | None = None,
    extra_header: dict | None = None,
) -> TrainResult:
    """Optimize the model on ``samples``.

    Each step runs the forward pass, samples the Gaussian heads (mode padl),
    backpropagates the loss and takes one Adam step. The learning rate follows
    the polynomial schedule at epoch boundaries. With ``out_dir`` set, a
    JSON-lines loss log is appended per step and a checkpoint written per
    epoch. ``stop_after_epoch`` ends the run early (as if interrupted); a later
    call with ``resume`` continues bit-identically.
    """
    x_all, y_all = stack_samples(samples)
    if y_all.shape[0] != config.model.annotator_count:
        raise ConfigurationError(
            f"dataset has {y_all.shape[0]} annotators but the model expects {config.model.annotator_count}"
        )
    params = build_model(config.model, config.seed)
    opt = Adam(params)
    rng = _run_rng(config.seed)
    start_epoch = 0
    if resume is not None:
        ckpt = dataio.load_checkpoint(resume)
        params.load_state(ckpt.arrays)
        opt.load_state(ckpt.arrays, ckpt.header["adam_steps"])
        rng.bit_generator.state = ckpt.header["rng_state"]
        start_epoch = ckpt.header["epoch"]

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        log_file = open(out_path / "loss_log.jsonl", "a" if resume is not None else "w")

    n = x_all.shape[0]
    bs = config.batch_size
    loss_log: list[dict] = []
    evaluations: list[dict] = []
    step = opt.steps
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = poly_lr(config.lr0, epoch, config.epochs)
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                if len(idx) < 2 and config.model.backbone.batch_norm:
                    continue
                params.zero_grad()
                out = model_forward(params, config.model, Tensor(x_all[idx]), training=True)
                breakdown = compute_loss(config, out, y_all[:, idx], rng)
                if not math.isfinite(breakdown.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
                breakdown.loss.backward()
                opt.step(lr)
                step += 1
                record = {"epoch": epoch, "step": step, **breakdown.record(), "lr": lr}
                loss_log.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
            if log_file is not None:
                log_file.flush()
                save_training_state(out_path / "checkpoint.padl", params, opt, config, epoch + 1, rng, extra_header)
            if eval_samples is not None and config.eval_interval and (epoch + 1) % config.eval_interval == 0:
                rep = evaluate_model(params, config, eval_samples)
                evaluations.append({"epoch": epoch + 1, "average": rep.average, "mean_voting": rep.mean_voting})
                logger.info("epoch %d: average %.2f mean voting %.2f", epoch + 1, rep.average, rep.mean_voting)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                epoch += 1
                break
        else:
            epoch = config.epochs
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, config, loss_log, opt, epoch, evaluations)


# -- inference and evaluation -------------------------------------------------------------
@dataclass
class Prediction:
    meta_prob: np.ndarray
    sigma: np.ndarray | None
    head_probs: np.ndarray | None
    head_sigmas: np.ndarray | None


def predict(params: ParameterSet, config: TrainConfig, x: np.ndarray, batch_size: int = 16) -> Prediction:
    """Deterministic outputs: sigmoid(mu), sigma, and sigmoid(mu_r) per head."""
    metas, sigmas, heads, head_sigmas = [], [], [], []
    training = config.eval_batch_stats
    for start in range(0, len(x), batch_size):
        out = model_forward(params, config.model, Tensor(x[start:start + batch_size]), training=training)
        metas.append(out.prob.data)
        if out.sigma is not None:
            sigmas.append(out.sigma.data)
        if out.heads:
            heads.append(np.stack([h.prob_r.data for h in out.heads]))
            if out.heads[0].sigma_r is not None:
                head_sigmas.append(np.stack([h.sigma_r.data for h in out.heads]))
    return Prediction(
        np.concatenate(metas),
        np.concatenate(sigmas) if sigmas else None,
        np.concatenate(heads, axis=1) if heads else None,
        np.concatenate(head_sigmas, axis=1) if head_sigmas else None,
    )


def evaluate_prediction(pred: Prediction, samples: Sequence[AnnotatedSample]) -> EvaluationReport:
    reports = []
    for i, s in enumerate(samples):
        head = None if pred.head_probs is None else [pred.head_probs[r, i] for r in range(len(s.y))]
        reports.append(evaluate(pred.meta_prob[i], head, s.y))
    report = aggregate_reports(reports)
    ranks = {"annotations": _rank_dict(dataset_preference_rank([s.y for s in samples]))}
    if pred.head_probs is not None:
        binarized = [[(pred.head_probs[r, i] >= 0.5) for r in range(pred.head_probs.shape[0])] for i in range(len(samples))]
        kept = [m for m in binarized if any(x.any() for x in m)]
        if kept:
            ranks["predicted"] = _rank_dict(dataset_preference_rank(kept))
            ranks["predicted"]["samples"] = len(kept)
    report.preference_ranks = ranks
    return report


def _rank_dict(table) -> dict:
    return {"iou": [float(v) for v in table.iou], "ranks": list(table.ranks)}


def evaluate_model(params: ParameterSet, config: TrainConfig, samples: Sequence[AnnotatedSample]) -> EvaluationReport:
    x, _ = stack_samples(samples)
    return evaluate_prediction(predict(params, config, x), samples)


def matched_head_dice(pred: Prediction, samples: Sequence[AnnotatedSample]) -> np.ndarray:
    """R x R matrix of mean soft Dice between head r's map and annotator q's masks."""
    from .metrics import soft_dice

    r_count = pred.head_probs.shape[0]
    table = np.zeros((r_count, r_count))
    for i, s in enumerate(samples):
        for r in range(r_count):
            for q in range(r_count):
                table[r, q] += soft_dice(pred.head_probs[r, i], s.y[q])
    return table / len(samples)


def boundary_band(true_mask: np.ndarray, width: float = 2.0) -> np.ndarray:
    """Pixels within ``width`` pixels of the clean contour."""
    return contour_distance(true_mask) <= width


def sigma_band_ratio(sigma: np.ndarray, samples: Sequence[AnnotatedSample], width: float = 2.0) -> tuple[float, float]:
    """Mean sigma inside the contour band and outside it, pooled over samples."""
    inside, outside = [], []
    for i, s in enumerate(samples):
        band = boundary_band(s.true_mask, width)
        inside.append(sigma[i][band])
        outside.append(sigma[i][~band])
    return float(np.concatenate(inside).mean()), float(np.concatenate(outside).mean())


# -- ablations ----------------------------------------------------------------------------------
SEM_ABLATION = {
    "baseline": ["model.sem.enable_sigma=false", "model.sem.enable_entropy_attention=false", "model.sem.enable_mu_prior=false"],
    "sigma": ["model.sem.enable_entropy_attention=false", "model.sem.enable_mu_prior=false"],
    "sigma+entropy": ["model.sem.enable_mu_prior=false"],
    "sigma+entropy+prior": [],
}

MODULE_ABLATION = {
    "padl": [],
    "w/o SEM": SEM_ABLATION["baseline"],
    "w/o HPM": ["model.use_hpm=false"],
}

BASELINES = {
    "mv": ["model.mode=\"mv\""],
    "ls": ["model.mode=\"ls\""],
    "mh": ["model.mode=\"mh\""],
}


def variant_config(base: TrainConfig, overrides: Sequence[str]) -> TrainConfig:
    return TrainConfig.from_dict(cfg.apply_overrides(base.to_dict(), overrides))


def run_ablation(
    base: TrainConfig,
    variants: dict[str, Sequence[str]],
    train_samples: Sequence[AnnotatedSample],
    test_samples: Sequence[AnnotatedSample],
    out_dir: str | Path | None = None,
) -> dict:
    """Train each variant with the base seed and collect comparable scores."""
    rows = []
    for name, overrides in variants.items():
        conf = variant_config(base, overrides)
        run_dir = None if out_dir is None else Path(out_dir) / name.replace("/", "").replace(" ", "_")
        result = train(conf, train_samples, out_dir=run_dir)
        report = evaluate_model(result.params, conf, test_samples)
        rows.append(
            {
                "variant": name,
                "seed": conf.seed,
                "overrides": list(overrides),
                "average": report.average,
                "mean_voting": report.mean_voting,
                "per_annotator": report.per_annotator,
                "preference_ranks": report.preference_ranks,
                "final_loss": result.loss_log[-1]["total"] if result.loss_log else None,
            }
        )
        logger.info("%s: average %.2f mean voting %.2f", name, report.average, report.mean_voting)
    summary = {"seed": base.seed, "rows": rows}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
