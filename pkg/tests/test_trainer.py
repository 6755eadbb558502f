import json
import math

import numpy as np
import pytest

from padl.autodiff import Tensor
from padl.backbone import BackboneConfig
from padl.errors import ConfigurationError, DivergenceError, ScheduleError
from padl.hpm import HpmConfig
from padl.model import ModelConfig
from padl.params import ParameterSet
from padl.sem import SemConfig
from padl.synthdata import SceneSpec, default_profiles, make_sample
from padl.trainer import (
    Adam,
    TrainConfig,
    evaluate_model,
    poly_lr,
    run_ablation,
    sigma_band_ratio,
    train,
    variant_config,
)

SCENE = SceneSpec(height=32, width=32, size_range=(5.0, 7.0), jitter=2.0)


def small_samples(n, start=0):
    out = []
    for i in range(start, start + n):
        s = make_sample(SCENE, default_profiles(), i)
        s.x = ((s.x.astype(np.float32) - 110.0) / 40.0).astype(np.float32)
        out.append(s)
    return out


def small_config(**kw):
    model = ModelConfig(
        mode=kw.pop("mode", "padl"),
        backbone=BackboneConfig(levels=3, base_channels=4, out_channels=8),
        sem=SemConfig(sigma_features=4),
        hpm=HpmConfig(hidden_channels=4),
        use_hpm=kw.pop("use_hpm", True),
    )
    return TrainConfig(model=model, lr0=kw.pop("lr0", 3e-3), epochs=kw.pop("epochs", 2), batch_size=4, **kw)


# -- schedule and optimizer ----------------------------------------------------------------------
def test_poly_lr_values():
    assert poly_lr(1e-4, 0, 30) == 1e-4
    assert poly_lr(1e-4, 30, 30) == 0.0
    assert abs(poly_lr(1.0, 15, 30) - 0.5**0.9) < 1e-9
    assert poly_lr(1.0, 15, 30) == pytest.approx(0.53589, abs=1e-5)
    with pytest.raises(ScheduleError):
        poly_lr(1e-4, 31, 30)
    with pytest.raises(ScheduleError):
        poly_lr(1e-4, -1, 30)


def _single_param(value, grad):
    ps = ParameterSet(np.float64)
    p = ps.add("w", np.array(value, dtype=float))
    p.grad = np.array(grad, dtype=float)
    return ps, p


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-9])
    ps, p = _single_param([1.0, 1.0, 1.0], g)
    lr, eps = 0.01, 1e-8
    Adam(ps).step(lr)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = 1.0 - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-9)


def test_adam_two_steps_match_reference():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    g1, g2 = 0.5, -1.5
    ps, p = _single_param([0.0], [g1])
    opt = Adam(ps)
    opt.step(lr)
    p.grad = np.array([g2])
    opt.step(lr)
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    x1 = -lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    assert p.data[0] == pytest.approx(x2, abs=1e-12)


def test_adam_zero_gradient_keeps_parameters_and_decays_moments():
    ps, p = _single_param([2.0], [1.0])
    opt = Adam(ps)
    opt.step(0.1)
    before, m_before = p.data.copy(), opt.m["w"].copy()
    opt.m["w"][...] = 0.0
    opt.v["w"][...] = 0.0
    p.grad = np.zeros(1)
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, before)
    opt.m["w"][...] = m_before
    p.grad = np.zeros(1)
    opt.step(0.0)
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)


def test_adam_rejects_nan_gradient_with_name():
    ps, p = _single_param([1.0], [np.nan])
    with pytest.raises(DivergenceError, match="'w'"):
        Adam(ps).step(0.1)
    assert p.data[0] == 1.0


def test_train_config_invariants():
    with pytest.raises(ConfigurationError):
        small_config(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)


# -- training ----------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def data():
    return small_samples(12), small_samples(4, 100)


def test_identical_seed_runs_are_bitwise_identical(data, tmp_path):
    conf = small_config()
    train(conf, data[0], out_dir=tmp_path / "a")
    train(conf, data[0], out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "loss_log.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    records = [json.loads(line) for line in a.splitlines()]
    assert set(records[0]) == {"epoch", "step", "l_meta", "l_pref", "total", "lr"}
    assert len(records[0]["l_pref"]) == 3
    assert [r["lr"] for r in records if r["epoch"] == 1][0] == poly_lr(conf.lr0, 1, conf.epochs)


def test_resume_continues_bitwise(data, tmp_path):
    conf = small_config(epochs=3)
    full = train(conf, data[0], out_dir=tmp_path / "full")
    train(conf, data[0], out_dir=tmp_path / "part", stop_after_epoch=1)
    resumed = train(conf, data[0], out_dir=tmp_path / "part2", resume=tmp_path / "part" / "checkpoint.padl")
    assert resumed.loss_log == full.loss_log[len(full.loss_log) - len(resumed.loss_log):]
    for name in full.params.names():
        assert full.params[name].data.tobytes() == resumed.params[name].data.tobytes()


def test_every_parameter_receives_gradient(data):
    conf = small_config(epochs=1)
    from padl.model import build_model, model_forward
    from padl.trainer import compute_loss, stack_samples

    ps = build_model(conf.model, 0)
    x, y = stack_samples(data[0][:4])
    out = model_forward(ps, conf.model, Tensor(x))
    compute_loss(conf, out, y, np.random.default_rng(0)).loss.backward()
    dead = [n for n, p in ps.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_loss_decreases():
    samples = small_samples(24)
    result = train(small_config(epochs=5, lr0=3e-3), samples)
    totals = [r["total"] for r in result.loss_log]
    steps = len(totals) // 5
    assert np.mean(totals[-steps:]) < 0.8 * np.mean(totals[:steps])


@pytest.mark.parametrize("mode", ["mv", "ls", "mh"])
def test_baseline_modes_train(data, mode):
    conf = small_config(mode=mode, epochs=1)
    result = train(conf, data[0])
    assert all(np.isfinite(r["total"]) for r in result.loss_log)
    rep = evaluate_model(result.params, conf, data[1])
    expected_source = "head" if mode == "mh" else "meta"
    assert {row["source"] for row in rep.per_annotator} == {expected_source}


def test_annotator_count_mismatch(data):
    conf = small_config()
    conf.model.hpm.annotator_count = 2
    with pytest.raises(ConfigurationError):
        train(conf, data[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(data, tmp_path):
    conf = small_config(lr0=1e30, epochs=3)
    with pytest.raises(DivergenceError):
        train(conf, data[0], out_dir=tmp_path)


def test_run_ablation_rows(data, tmp_path):
    base = small_config(epochs=1)
    variants = {"padl": [], "w/o HPM": ["model.use_hpm=false"]}
    summary = run_ablation(base, variants, data[0], data[1], out_dir=tmp_path)
    assert [r["variant"] for r in summary["rows"]] == ["padl", "w/o HPM"]
    assert {r["seed"] for r in summary["rows"]} == {base.seed}
    assert summary["rows"][1]["per_annotator"][0]["source"] == "meta"
    assert json.loads((tmp_path / "ablation.json").read_text()) == summary


def test_variant_config_rejects_unknown_key():
    with pytest.raises(ConfigurationError):
        variant_config(small_config(), ["model.nonexistent=1"])


def test_sigma_band_ratio_oracle():
    s = small_samples(1)
    band = np.zeros((1, 1, 32, 32))
    from padl.synthdata import contour_distance

    inside = contour_distance(s[0].true_mask) <= 2
    sigma = np.where(inside, 3.0, 1.0)[None]
    i, o = sigma_band_ratio(sigma + band, s)
    assert (i, o) == (3.0, 1.0)
