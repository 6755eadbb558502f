"""Generate a scene, apply three annotator styles, and inspect how noise and preference show up."""

# %%
import numpy as np

from padl.metrics import dataset_preference_rank, preference_rank
from padl.synthdata import (
    SceneSpec,
    apply_preference,
    contour_distance,
    default_profiles,
    flip_probability,
    gen_base,
    make_sample,
)

scene = SceneSpec()
image, truth = gen_base(scene, index=0)
print("image", image.shape, "foreground pixels", int(truth.sum()))

# %% Each profile is a systematic shift (dilate, identity, erode) plus boundary flips.
profiles = default_profiles(noise_amplitude=1.0)
for p in profiles:
    shifted = apply_preference(truth, p)
    print(p, "->", int(shifted.sum()), "pixels before noise")

# %% Flips only happen near the contour. Distances start at 1 (a boundary pixel's nearest opposite neighbour).
prob = flip_probability(truth, 1.0)
d = contour_distance(truth)
for lo, hi in [(1, 2), (2, 3), (3, 4), (4, 100)]:
    band = (d >= lo) & (d < hi)
    print(f"distance [{lo},{hi}): mean flip probability {prob[band].mean():.3f}")

# %% The union-IoU ranking recovers the construction order, per sample and over a set.
sample = make_sample(scene, profiles, 0)
print("one sample:", preference_rank(sample.y).format_row())
many = [make_sample(scene, profiles, i).y for i in range(50)]
print("fifty samples:", dataset_preference_rank(many).format_row())
