# %% [markdown]
# Building models by name and probing their layer shapes.

# %%
import numpy as np

from btranspose.model import build_model, count_params, parse_name
from btranspose.tensor import Tensor, no_grad

# %%
spec = parse_name("C3A1(4)")
print(spec.widths, spec.blocks_per_group, spec.mhsa_heads, spec.encoder.n_layers)

# %%
# instrumented forward: each stage appends (label, shape)
model = build_model(spec, seed=0).eval()
trace = []
with no_grad():
    heatmaps, record = model(Tensor(np.zeros((1, 3, 256, 192), dtype=np.float32)), trace)
for label, shape in trace:
    print(f"{label:8s} {shape[1:]}")

# %%
for name in ["C2A1(4)", "C2A2(4)", "C3A1(4)", "C3A1(8)", "C3A1(4)-N6", "C3A1(4)-Large"]:
    print(name, f"{count_params(build_model(name)) / 1e6:.2f}M")

# %%
# attention maps kept from the forward pass
print(record.mhsa[0].shape, record.encoder.shape)
