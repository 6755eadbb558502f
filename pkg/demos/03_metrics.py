"""Threshold-averaged overlap scores on small hand-made examples."""

# %%
import numpy as np

from padl.metrics import THRESHOLDS, mean_voting, soft_dice, soft_iou

print("thresholds", THRESHOLDS)

# %% A flat 0.5 map against an all-foreground mask clears three of the five thresholds.
print(soft_dice(np.full((8, 8), 0.5), np.ones((8, 8))))

# %% A confident but shifted prediction.
gt = np.zeros((16, 16), np.uint8)
gt[4:12, 4:12] = 1
pred = np.zeros((16, 16))
pred[5:13, 5:13] = 0.9
print("dice", soft_dice(pred, gt), "iou", soft_iou(pred, gt))

# %% Mean voting turns several masks into a soft target.
a, b, c = gt.copy(), np.roll(gt, 1, axis=0), np.roll(gt, 1, axis=1)
vote = mean_voting([a, b, c])
print(np.unique(vote))
print("prediction vs vote:", soft_dice(pred, vote > 0.5))
