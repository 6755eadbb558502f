"""Finite-difference check of the complete model graph at toy size."""
from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, Tensor, check_gradients, sigmoid
from .backbone import BackboneConfig
from .hpm import HpmConfig
from .model import ModelConfig, build_model, model_forward
from .sampling import reparameterize, total_loss
from .sem import SemConfig


def small_model_config(annotator_count: int = 3) -> ModelConfig:
    """Full padl graph with narrow layers so every weight can be probed."""
    return ModelConfig(
        mode="padl",
        backbone=BackboneConfig(levels=3, base_channels=2, out_channels=4),
        sem=SemConfig(sigma_features=3),
        hpm=HpmConfig(depth=2, kernel=3, hidden_channels=3, annotator_count=annotator_count),
    )


def model_gradcheck(
    config: ModelConfig | None = None,
    seed: int = 0,
    batch: int = 4,
    size: int = 8,
    epsilon: float = 1e-5,
    threshold: float = 1e-5,
    max_elements: int | None = None,
    oracle_dtype=np.longdouble,
    order: int = 4,
) -> GradCheckReport:
    """Gradient check of the total loss with respect to every parameter, in float64.

    Images, annotations, the selected annotation and the Gaussian noise are all
    drawn once from ``seed`` and held fixed, so the loss is a deterministic
    function of the weights. The analytic pass runs in float64; the
    finite-difference oracle runs in ``oracle_dtype``.
    """
    config = config or small_model_config()
    ps = build_model(config, seed, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    r_count = config.annotator_count
    k = config.num_classes
    x = rng.standard_normal((batch, config.backbone.in_channels, size, size))
    ys = (rng.random((r_count, batch, k, size, size)) < 0.5).astype(np.float64)
    sel = rng.integers(r_count, size=batch)
    y_s = ys[sel, np.arange(batch)]
    noise_meta = rng.standard_normal((batch, k, size, size))
    noise_heads = rng.standard_normal((r_count, batch, k, size, size))

    def closure() -> Tensor:
        out = model_forward(ps, config, Tensor(x), training=True)
        meta = sigmoid(reparameterize(out.mu, out.sigma, noise_meta)) if out.sigma is not None else out.prob
        prefs = [
            sigmoid(reparameterize(h.mu_r, h.sigma_r, noise_heads[r])) if h.sigma_r is not None else h.prob_r
            for r, h in enumerate(out.heads)
        ]
        return total_loss(meta, y_s, prefs, list(ys)).loss

    params = {name: ps[name] for name in ps.names()}
    return check_gradients(closure, params, epsilon, threshold, max_elements, seed, oracle_dtype, order)
