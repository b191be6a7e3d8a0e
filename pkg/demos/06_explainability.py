# %% [markdown]
# Dependency areas: the attention row at a predicted keypoint.

# %%
import numpy as np

from btranspose.evaluation import decode_keypoints
from btranspose.explain import dependency_map, explain_image, keypoint_to_token
from btranspose.model import build_model
from btranspose.synth import generate_sample
from btranspose.tensor import Tensor, no_grad

# %%
model = build_model("C3A1(4)", seed=0).eval()
image = generate_sample(5).image
with no_grad():
    heatmaps, record = model(Tensor(image[None]))
pred = decode_keypoints(heatmaps.data[0])

# %%
k = 15  # left ankle
token = keypoint_to_token(pred[k, :2])
for source in ("mhsa", "encoder"):
    m = dependency_map(record, source, token)
    peak = np.unravel_index(m.grid.argmax(), m.grid.shape)
    print(source, m.grid.shape, round(m.grid.sum(), 6), "peak cell", tuple(int(i) for i in peak))

# %%
files = explain_image(image, record, pred, [k], "overlays", image_id=5)
print([f.name for f in files])
