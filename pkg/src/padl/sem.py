"""Stochastic error modeling: meta segmentation ``mu``, error map ``sigma`` and
the entropy-guided attention (EGA) block that calibrates the sigma features.

``mu`` is a logit map; the entropy that drives the attention is computed on
``sigmoid(mu)``. ``sigma`` ends in a softplus so the Gaussian ``N(mu, sigma^2)``
is always well defined.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clip, concat, log, relu, sigmoid, softplus
from .errors import ConfigurationError, DimensionError
from .params import ParameterSet, add_bn, add_conv, bn, conv

ENTROPY_EPS = 1e-7
_LN2 = np.log(2.0)


@dataclass
class SemConfig:
    enable_sigma: bool = True
    enable_entropy_attention: bool = True
    enable_mu_prior: bool = True
    sigma_features: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if (self.enable_entropy_attention or self.enable_mu_prior) and not self.enable_sigma:
            raise ConfigurationError("entropy attention and mu prior require enable_sigma")
        if self.sigma_features < 1:
            raise ConfigurationError("sigma_features must be positive")


@dataclass
class SemIntermediate:
    f_sigma: Tensor | None
    f_sigma_calibrated: Tensor | None
    entropy: Tensor | None


@dataclass
class SemOutput:
    mu: Tensor
    sigma: Tensor | None
    prob: Tensor


def entropy_map(prob) -> Tensor:
    """Binary entropy in bits of a probability map, clamped to ``[eps, 1 - eps]``."""
    p = clip(as_tensor(prob), ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    q = 1.0 - p
    return (p * log(p) + q * log(q)) * (-1.0 / _LN2)


def ega_calibrate(f_sigma: Tensor, entropy: Tensor) -> Tensor:
    """Scale sigma features by ``1 + entropy``.

    A single entropy channel multiplies every feature channel. With K entropy
    channels the features are treated as K consecutive groups, group k scaled
    by entropy channel k.
    """
    f_sigma, entropy = as_tensor(f_sigma), as_tensor(entropy)
    if f_sigma.ndim != entropy.ndim or f_sigma.shape[2:] != entropy.shape[2:] or f_sigma.shape[0] != entropy.shape[0]:
        raise DimensionError(f"cannot calibrate features {f_sigma.shape} with entropy {entropy.shape}")
    k = entropy.shape[1]
    weight = entropy + 1.0
    if k == 1:
        return f_sigma * weight
    c = f_sigma.shape[1]
    if c % k:
        raise DimensionError(f"{c} feature channels cannot be grouped over {k} entropy channels")
    n, _, h, w = f_sigma.shape
    grouped = f_sigma.reshape(n, k, c // k, h, w) * weight.reshape(n, k, 1, h, w)
    return grouped.reshape(n, c, h, w)


def build_mu_head(ps: ParameterSet, name: str, in_channels: int, num_classes: int, rng) -> None:
    add_conv(ps, name, in_channels, num_classes, 1, rng)


def mu_head(ps: ParameterSet, f_img: Tensor, name: str = "sem.mu") -> Tensor:
    return conv(ps, name, f_img)


def build_sigma_head(ps: ParameterSet, name: str, in_channels: int, num_classes: int, config: SemConfig, rng) -> None:
    g = config.sigma_features * num_classes
    add_conv(ps, f"{name}.features", in_channels, g, 1, rng, bias=False)
    add_bn(ps, f"{name}.features_bn", g)
    out_in = g + (num_classes if config.enable_mu_prior else 0)
    add_conv(ps, f"{name}.out", out_in, num_classes, 1, rng)


def sigma_head(
    ps: ParameterSet,
    f_img: Tensor,
    mu: Tensor,
    config: SemConfig,
    training: bool = True,
    name: str = "sem.sigma",
) -> tuple[Tensor, SemIntermediate]:
    if not config.enable_sigma:
        raise ConfigurationError("sigma_head called with enable_sigma=False")
    f_sigma = relu(bn(ps, f"{name}.features_bn", conv(ps, f"{name}.features", f_img), training))
    entropy = None
    calibrated = f_sigma
    if config.enable_entropy_attention:
        entropy = entropy_map(sigmoid(mu))
        calibrated = ega_calibrate(f_sigma, entropy)
    head_in = concat([mu, calibrated], axis=1) if config.enable_mu_prior else calibrated
    sigma = softplus(conv(ps, f"{name}.out", head_in))
    return sigma, SemIntermediate(f_sigma, calibrated, entropy)


def build_sem(ps: ParameterSet, in_channels: int, num_classes: int, config: SemConfig, rng, name: str = "sem") -> None:
    config.validate()
    build_mu_head(ps, f"{name}.mu", in_channels, num_classes, rng)
    if config.enable_sigma:
        build_sigma_head(ps, f"{name}.sigma", in_channels, num_classes, config, rng)


def sem_forward(
    ps: ParameterSet,
    f_img: Tensor,
    config: SemConfig,
    training: bool = True,
    name: str = "sem",
) -> tuple[SemOutput, SemIntermediate]:
    mu = mu_head(ps, f_img, f"{name}.mu")
    if not config.enable_sigma:
        return SemOutput(mu, None, sigmoid(mu)), SemIntermediate(None, None, None)
    sigma, inter = sigma_head(ps, f_img, mu, config, training, f"{name}.sigma")
    return SemOutput(mu, sigma, sigmoid(mu)), inter
