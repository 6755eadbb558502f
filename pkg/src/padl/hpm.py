"""Per-annotator preference heads.

Head ``r`` reduces ``f_img`` to K channels (1x1 conv, BN, ReLU), concatenates
the meta segmentation ``mu`` and runs a small stack of k x k convolutions to get
the annotator's logit map ``mu_r``. Its own EGA block, driven by the entropy
of ``sigmoid(mu_r)``, gives ``sigma_r``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, concat, relu, sigmoid
from .errors import ConfigurationError
from .params import ParameterSet, add_bn, add_conv, bn, conv
from .sem import SemConfig, build_sigma_head, sigma_head


@dataclass
class HpmConfig:
    depth: int = 2
    kernel: int = 3
    padding: int | None = None
    hidden_channels: int = 8
    annotator_count: int = 3

    def __post_init__(self):
        if self.padding is None:
            self.padding = (self.kernel - 1) // 2
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigurationError("preference block depth must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"preference block kernel must be odd, got {self.kernel}")
        if self.padding != (self.kernel - 1) // 2:
            raise ConfigurationError(
                f"padding must be (kernel - 1) / 2 = {(self.kernel - 1) // 2} to preserve resolution"
            )
        if self.annotator_count < 1:
            raise ConfigurationError("annotator_count must be >= 1")
        if self.hidden_channels < 1:
            raise ConfigurationError("hidden_channels must be >= 1")

    @property
    def receptive_field(self) -> int:
        return 1 + self.depth * (self.kernel - 1)


def hpm_variant(depth: int, kernel: int, annotator_count: int = 3, hidden_channels: int = 8) -> HpmConfig:
    """Preference block with the requested depth and kernel size."""
    return HpmConfig(depth=depth, kernel=kernel, hidden_channels=hidden_channels, annotator_count=annotator_count)


@dataclass
class AnnotatorHeadOutput:
    mu_r: Tensor
    sigma_r: Tensor | None
    prob_r: Tensor


def _layer_channels(config: HpmConfig, num_classes: int) -> list[tuple[int, int]]:
    sizes = [2 * num_classes] + [config.hidden_channels] * (config.depth - 1) + [num_classes]
    return list(zip(sizes[:-1], sizes[1:]))


def build_hpm(
    ps: ParameterSet,
    r: int,
    in_channels: int,
    num_classes: int,
    config: HpmConfig,
    sem_config: SemConfig,
    rng,
) -> None:
    name = f"hpm.{r}"
    add_conv(ps, f"{name}.reduce", in_channels, num_classes, 1, rng, bias=False)
    add_bn(ps, f"{name}.reduce_bn", num_classes)
    for layer, (cin, cout) in enumerate(_layer_channels(config, num_classes)):
        add_conv(ps, f"{name}.pref.{layer}", cin, cout, config.kernel, rng)
    if sem_config.enable_sigma:
        build_sigma_head(ps, f"{name}.sigma", in_channels, num_classes, sem_config, rng)


def hpm_forward(
    ps: ParameterSet,
    f_img: Tensor,
    mu: Tensor,
    r: int,
    config: HpmConfig,
    sem_config: SemConfig,
    training: bool = True,
    detach_mu: bool = False,
) -> AnnotatorHeadOutput:
    """Annotator ``r`` (0-based) prediction from shared features and the meta map."""
    if not 0 <= r < config.annotator_count:
        raise IndexError(f"annotator index {r} out of range for {config.annotator_count} annotators")
    name = f"hpm.{r}"
    if detach_mu:
        mu = mu.detach()
    reduced = relu(bn(ps, f"{name}.reduce_bn", conv(ps, f"{name}.reduce", f_img), training))
    feat = concat([mu, reduced], axis=1)
    for layer in range(config.depth):
        feat = conv(ps, f"{name}.pref.{layer}", feat, padding=config.padding)
        if layer < config.depth - 1:
            feat = relu(feat)
    mu_r = feat
    sigma_r = None
    if sem_config.enable_sigma:
        sigma_r, _ = sigma_head(ps, f_img, mu_r, sem_config, training, f"{name}.sigma")
    return AnnotatorHeadOutput(mu_r, sigma_r, sigmoid(mu_r))
