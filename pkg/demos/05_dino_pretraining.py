# %% [markdown]
# Self-distillation on unlabeled images, with and without centering.

# %%
import numpy as np

from btranspose.checkpoint import load_pretrained
from btranspose.dino import DinoConfig, pretrain
from btranspose.model import build_model, tiny_spec
from btranspose.synth import generate_dataset

# %%
spec = tiny_spec("C3A1(4)", input_size=(64, 48), widths=(8, 12, 16, 32), d_model=64, d_ffn=128, enc_heads=2)
images = np.stack([s.image for s in generate_dataset(64, seed=1)])

# %%
for centering in (True, False):
    res = pretrain(spec, images, 100, seed=0, cfg=DinoConfig(centering=centering))
    std = [r["teacher_std"] for r in res.trace]
    print("centering", centering, "teacher std", f"{std[0]:.5f} -> {std[-1]:.2e}")

# %%
# the teacher backbone goes into a pose model as its initialization
path = res.save("dino_backbone.btrw")
model = build_model(spec, seed=0)
print(len(load_pretrained(model, path)), "tensors loaded")
