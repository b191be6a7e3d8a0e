# %% [markdown]
# Stick-figure samples, Gaussian targets and augmentation.

# %%
import numpy as np

from btranspose.evaluation import decode_keypoints
from btranspose.synth import KEYPOINT_NAMES, augment, generate_sample, make_target_heatmaps, write_ppm

# %%
s = generate_sample(3)
print(s.image.shape, s.area)
for name, (x, y, v) in zip(KEYPOINT_NAMES, s.keypoints):
    print(f"{name:15s} {x:6.1f} {y:6.1f} v={v:.0f}")
write_ppm("sample3.ppm", s.image)

# %%
maps, mask = make_target_heatmaps(s)
print(maps.shape, mask.sum(), maps[0].max())

# decoding the targets lands within a couple of pixels
err = np.hypot(*(decode_keypoints(maps)[:, :2] - s.keypoints[:, :2]).T)
print("decode error px", err[mask].max().round(2))

# %%
aug, m = augment(s, seed=11, return_matrix=True)
print(np.round(m, 3))
write_ppm("sample3_aug.ppm", aug.image)
