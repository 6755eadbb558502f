"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 share one dataset (200 train / 50 test, 64x64, three annotators
with dilate-2 / identity / erode-2 preferences, noise amplitude 1) and one
training run per model variant, built once per session.
"""
import json
import time

import numpy as np
import pytest

from conftest import CRITERIA
from padl import cli, dataio
from padl.autodiff import Tensor
from padl.metrics import soft_dice, soft_iou
from padl.params import ParameterSet
from padl.sampling import gaussian_sample
from padl.sem import SemConfig, build_sem, ega_calibrate, entropy_map, sem_forward
from padl.synthdata import SceneSpec, default_profiles, gen_dataset
from padl.trainer import (
    Adam,
    MODULE_ABLATION,
    TrainConfig,
    evaluate_prediction,
    matched_head_dice,
    poly_lr,
    predict,
    sigma_band_ratio,
    stack_samples,
    train,
    variant_config,
)

# Desk-scale learning rate: 30 epochs of 25 steps are too few for lr0 = 1e-4.
ACCEPTANCE_LR = 1e-3
EPOCHS = 30


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)
    print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


# -- 1 ---------------------------------------------------------------------------------------------
def test_criterion_1_full_model_gradient_check(tmp_path):
    start = time.process_time()
    code = cli.run(["gradcheck", "--out", str(tmp_path)])
    elapsed = time.process_time() - start
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    n = sum(rep["elements_checked"].values())
    ok = code == 0 and rep["max_error"] < 1e-5 and elapsed < 120
    record(1, ok, f"max relative error {rep['max_error']:.2e} over {n} weights, {elapsed:.0f}s CPU")


# -- 2 ---------------------------------------------------------------------------------------------
def test_criterion_2_entropy_and_attention():
    checks = []
    checks.append(abs(entropy_map(np.array([0.5])).data[0] - 1.0) <= 1e-12)
    grid = np.linspace(0.0, 1.0, 1000)
    checks.append(np.max(np.abs(entropy_map(grid).data - entropy_map(1.0 - grid).data)) <= 1e-12)
    f = np.random.default_rng(0).standard_normal((2, 8, 4, 4))
    checks.append(np.array_equal(ega_calibrate(Tensor(f), Tensor(np.zeros((2, 1, 4, 4)))).data, f))
    checks.append(np.array_equal(ega_calibrate(Tensor(f), Tensor(np.ones((2, 1, 4, 4)))).data, 2 * f))
    rng = np.random.default_rng(1)
    positive = 0
    for trial in range(100):
        ps = ParameterSet()
        build_sem(ps, 32, 1, SemConfig(), np.random.default_rng(trial))
        x = (rng.standard_normal((2, 32, 8, 8)) * rng.uniform(0.1, 10)).astype(np.float32)
        out, _ = sem_forward(ps, Tensor(x), SemConfig())
        positive += bool((out.sigma.data > 0).all())
    checks.append(positive == 100)
    record(2, all(checks), f"{sum(checks)}/5 checks, sigma > 0 in {positive}/100 passes")


# -- 3 ---------------------------------------------------------------------------------------------
def test_criterion_3_sampling_statistics():
    n = 100_000
    draw = gaussian_sample(Tensor(np.zeros(n)), Tensor(np.ones(n)), 123).raw_sample.data
    mean, std = float(draw.mean()), float(draw.std())
    mu = np.random.default_rng(5).standard_normal((4, 1, 8, 8)).astype(np.float32)
    zero = gaussian_sample(Tensor(mu), Tensor(np.zeros_like(mu)), 7).raw_sample.data
    a = gaussian_sample(Tensor(mu), Tensor(np.ones_like(mu)), 99).raw_sample.data
    b = gaussian_sample(Tensor(mu), Tensor(np.ones_like(mu)), 99).raw_sample.data
    ok = abs(mean) <= 0.01 and abs(std - 1) <= 0.01 and zero.tobytes() == mu.tobytes() and a.tobytes() == b.tobytes()
    record(3, ok, f"mean {mean:+.4f}, std {std:.4f}, sigma=0 bitwise {zero.tobytes() == mu.tobytes()}")


# -- 4 ---------------------------------------------------------------------------------------------
def _brute(pred, gt, kind):
    scores = []
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        inter = na = nb = union = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            a, b = p >= t, g >= t
            inter, na, nb, union = inter + (a and b), na + a, nb + b, union + (a or b)
        if kind == "dice":
            scores.append(1.0 if na + nb == 0 else 2.0 * inter / (na + nb))
        else:
            scores.append(1.0 if union == 0 else inter / union)
    return sum(scores) / len(scores) * 100.0


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        pred = rng.random((8, 8))
        gt = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        mismatches += soft_dice(pred, gt) != _brute(pred, gt, "dice")
        mismatches += soft_iou(pred, gt) != _brute(pred, gt, "iou")
    worked = soft_dice(np.full((8, 8), 0.5), np.ones((8, 8)))
    record(4, mismatches == 0 and worked == 60.0, f"{mismatches} mismatches in 2000 comparisons, worked example {worked}")


# -- shared training runs for 5-7 ----------------------------------------------------------------
@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    gen_dataset(SceneSpec(), default_profiles(1.0), 200, 50, root)
    return dataio.load_dataset(root, "train"), dataio.load_dataset(root, "test")


class Runs:
    def __init__(self, dataset):
        self.train_set, self.test_set = dataset
        self.base = TrainConfig(lr0=ACCEPTANCE_LR, epochs=EPOCHS, seed=0)
        self.cache = {}

    def get(self, name, overrides):
        if name not in self.cache:
            conf = variant_config(self.base, overrides)
            start = time.process_time()
            result = train(conf, self.train_set)
            seconds = time.process_time() - start
            x, _ = stack_samples(self.test_set)
            pred = predict(result.params, conf, x)
            self.cache[name] = (pred, evaluate_prediction(pred, self.test_set), seconds)
        return self.cache[name]


@pytest.fixture(scope="session")
def runs(dataset):
    return Runs(dataset)


# -- 5 ---------------------------------------------------------------------------------------------
def test_criterion_5_preference_recovery(runs):
    pred, report, seconds = runs.get("padl", MODULE_ABLATION["padl"])
    ranks = report.preference_ranks["predicted"]["ranks"]
    truth = [1, 2, 3]
    table = matched_head_dice(pred, runs.test_set)
    dominant = all(table[r, r] > table[r, q] for r in range(3) for q in range(3) if q != r)
    ok = ranks == truth and dominant and seconds < 30 * 60
    rows = "; ".join(" ".join(f"{v:.1f}" for v in row) for row in table)
    record(5, ok, f"predicted ranks {ranks} vs {truth}, head-vs-annotator Dice [{rows}], {seconds / 60:.1f} min CPU")


# -- 6 ---------------------------------------------------------------------------------------------
def test_criterion_6_sigma_concentrates_at_contours(runs):
    pred, _, _ = runs.get("padl", MODULE_ABLATION["padl"])
    inside, outside = sigma_band_ratio(pred.sigma, runs.test_set)
    ratio = inside / outside
    record(6, ratio >= 2.0, f"mean sigma in 2-px band {inside:.4f}, elsewhere {outside:.4f}, ratio {ratio:.3f} (need >= 2)")


# -- 7 ---------------------------------------------------------------------------------------------
def test_criterion_7_ablation_direction(runs):
    _, full, _ = runs.get("padl", MODULE_ABLATION["padl"])
    _, no_hpm, _ = runs.get("w/o HPM", MODULE_ABLATION["w/o HPM"])
    _, no_sem, _ = runs.get("w/o SEM", MODULE_ABLATION["w/o SEM"])
    _, mv, _ = runs.get("mv", ['model.mode="mv"'])
    hpm_gap = full.average - no_hpm.average
    sem_gap = full.mean_voting - no_sem.mean_voting
    mv_gap = full.mean_voting - mv.mean_voting
    ok = hpm_gap >= 1.0 and sem_gap >= 0.5 and mv_gap >= -1.0
    record(
        7,
        ok,
        f"Average full-w/oHPM {hpm_gap:+.2f} (need >= 1), MV full-w/oSEM {sem_gap:+.2f} (need >= 0.5), "
        f"MV full-mv {mv_gap:+.2f} (need >= -1); full avg {full.average:.2f} mv {full.mean_voting:.2f}",
    )


# -- 8 ---------------------------------------------------------------------------------------------
def test_criterion_8_determinism_and_persistence(dataset, tmp_path):
    train_set = dataset[0][:32]
    conf = TrainConfig(lr0=ACCEPTANCE_LR, epochs=3, seed=3)
    train(conf, train_set, out_dir=tmp_path / "a")
    train(conf, train_set, out_dir=tmp_path / "b")
    logs_equal = (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()

    train(conf, train_set, out_dir=tmp_path / "c", stop_after_epoch=1)
    resumed = train(conf, train_set, out_dir=tmp_path / "d", resume=tmp_path / "c" / "checkpoint.padl")
    full_log = [json.loads(line) for line in (tmp_path / "a" / "loss_log.jsonl").read_text().splitlines()]
    continues = resumed.loss_log[0] == full_log[len(full_log) - len(resumed.loss_log)]
    whole_tail = resumed.loss_log == full_log[len(full_log) - len(resumed.loss_log):]

    ckpt = dataio.load_checkpoint(tmp_path / "a" / "checkpoint.padl")
    dataio.save_checkpoint(tmp_path / "copy.padl", ckpt.arrays, {k: v for k, v in ckpt.header.items() if k != "arrays"})
    ckpt_exact = (tmp_path / "copy.padl").read_bytes() == (tmp_path / "a" / "checkpoint.padl").read_bytes()

    image = (np.arange(64 * 48) % 256).astype(np.uint8).reshape(48, 64)
    dataio.write_pgm(tmp_path / "x.pgm", image)
    pgm_exact = dataio.read_pgm(tmp_path / "x.pgm").tobytes() == image.tobytes()
    cfg_text = conf.to_dict()
    json_exact = TrainConfig.from_dict(json.loads(json.dumps(cfg_text))).to_dict() == cfg_text

    ok = logs_equal and continues and whole_tail and ckpt_exact and pgm_exact and json_exact
    record(
        8,
        ok,
        f"logs identical {logs_equal}, resume next step identical {continues} (all {whole_tail}), "
        f"checkpoint/PGM/JSON round-trips {ckpt_exact}/{pgm_exact}/{json_exact}",
    )


# -- 9 ---------------------------------------------------------------------------------------------
def test_criterion_9_schedule_and_optimizer():
    lr0 = 1e-4
    ends = poly_lr(lr0, 0, 30) == lr0 and poly_lr(lr0, 30, 30) == 0.0
    mid_err = abs(poly_lr(lr0, 15, 30) - lr0 * 0.5**0.9)
    ps = ParameterSet(np.float64)
    p = ps.add("w", np.array([0.5, -0.25, 3.0]))
    g = np.array([0.2, -4.0, 1e-6])
    p.grad = g.copy()
    lr = 1e-3
    Adam(ps).step(lr)
    closed_form = lr * np.abs(g) / (np.abs(g) + 1e-8)
    step_err = float(np.max(np.abs(np.abs(p.data - np.array([0.5, -0.25, 3.0])) - closed_form)))
    ok = ends and mid_err <= 1e-9 and step_err <= 1e-9
    record(9, ok, f"endpoints exact {ends}, midpoint error {mid_err:.1e}, first Adam step error {step_err:.1e}")
