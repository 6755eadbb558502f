"""Assembles backbone, SEM and HPM heads into the training modes.

``padl`` is the full framework (its ablations switch off sigma, entropy
attention, the mu prior or the preference heads). ``mv`` and ``ls`` are a
single plain head trained on mean-voting or sampled labels, ``mh`` has one
plain head per annotator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, sigmoid
from .backbone import BackboneConfig, backbone_forward, build_backbone
from .errors import ConfigurationError
from .hpm import AnnotatorHeadOutput, HpmConfig, build_hpm, hpm_forward
from .params import ParameterSet, add_conv, conv
from .sem import SemConfig, SemIntermediate, build_sem, sem_forward

MODES = ("padl", "mv", "ls", "mh")


@dataclass
class ModelConfig:
    mode: str = "padl"
    num_classes: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sem: SemConfig = field(default_factory=SemConfig)
    hpm: HpmConfig = field(default_factory=HpmConfig)
    use_hpm: bool = True
    detach_mu: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")

    @property
    def annotator_count(self) -> int:
        return self.hpm.annotator_count

    @property
    def effective_sem(self) -> SemConfig:
        if self.mode == "padl":
            return self.sem
        return SemConfig(enable_sigma=False, enable_entropy_attention=False, enable_mu_prior=False)

    @property
    def has_heads(self) -> bool:
        return self.mode == "mh" or (self.mode == "padl" and self.use_hpm)


@dataclass
class ModelOutput:
    f_img: Tensor
    mu: Tensor | None
    sigma: Tensor | None
    prob: Tensor
    heads: list[AnnotatorHeadOutput]
    intermediate: SemIntermediate | None = None


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    ps = build_backbone(config.backbone, rng, dtype=dtype)
    feat = config.backbone.out_channels
    k = config.num_classes
    if config.mode == "mh":
        for r in range(config.annotator_count):
            add_conv(ps, f"mh.{r}", feat, k, 1, rng)
        return ps
    build_sem(ps, feat, k, config.effective_sem, rng)
    if config.mode == "padl" and config.use_hpm:
        for r in range(config.annotator_count):
            build_hpm(ps, r, feat, k, config.hpm, config.sem, rng)
    return ps


def model_forward(ps: ParameterSet, config: ModelConfig, x: Tensor, training: bool = True) -> ModelOutput:
    f_img = backbone_forward(ps, x, config.backbone, training)
    if config.mode == "mh":
        heads = []
        for r in range(config.annotator_count):
            mu_r = conv(ps, f"mh.{r}", f_img)
            heads.append(AnnotatorHeadOutput(mu_r, None, sigmoid(mu_r)))
        prob = heads[0].prob_r
        for h in heads[1:]:
            prob = prob + h.prob_r
        return ModelOutput(f_img, None, None, prob * (1.0 / len(heads)), heads)
    sem_out, inter = sem_forward(ps, f_img, config.effective_sem, training)
    heads = []
    if config.mode == "padl" and config.use_hpm:
        for r in range(config.annotator_count):
            heads.append(
                hpm_forward(ps, f_img, sem_out.mu, r, config.hpm, config.sem, training, config.detach_mu)
            )
    return ModelOutput(f_img, sem_out.mu, sem_out.sigma, sem_out.prob, heads, inter)
