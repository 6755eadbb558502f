"""Train a small model on synthetic annotators and check whether its heads keep their styles apart.

The scene and network are shrunk so this finishes in under a minute on one core.
"""

# %%
import numpy as np

from padl.backbone import BackboneConfig
from padl.hpm import HpmConfig
from padl.model import ModelConfig
from padl.sem import SemConfig
from padl.synthdata import SceneSpec, default_profiles, make_sample
from padl.trainer import (
    TrainConfig,
    evaluate_prediction,
    matched_head_dice,
    predict,
    sigma_band_ratio,
    stack_samples,
    train,
)

scene = SceneSpec(height=32, width=32, size_range=(5.0, 7.0), jitter=2.0)
samples = [make_sample(scene, default_profiles(), i) for i in range(60)]
for s in samples:
    s.x = ((s.x.astype(np.float32) - 110.0) / 40.0).astype(np.float32)
train_set, test_set = samples[:48], samples[48:]

# %%
config = TrainConfig(
    model=ModelConfig(
        backbone=BackboneConfig(levels=3, base_channels=4, out_channels=8),
        sem=SemConfig(sigma_features=4),
        hpm=HpmConfig(hidden_channels=4),
    ),
    lr0=3e-3,
    epochs=8,
    batch_size=4,
)
result = train(config, train_set)
print("first/last loss", result.loss_log[0]["total"], result.loss_log[-1]["total"])

# %% Rows are heads, columns are annotators. With more data and epochs the diagonal dominates.
x, _ = stack_samples(test_set)
pred = predict(result.params, config, x)
print(np.round(matched_head_dice(pred, test_set), 1))
report = evaluate_prediction(pred, test_set)
print("average", round(report.average, 2), "mean voting", round(report.mean_voting, 2))
print("ranks", report.preference_ranks)

# %% Where does the predicted spread sit relative to the true contour?
inside, outside = sigma_band_ratio(pred.sigma, test_set)
print(f"sigma near contour {inside:.3f}, elsewhere {outside:.3f}")
