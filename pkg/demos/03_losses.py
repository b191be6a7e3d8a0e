# %% [markdown]
# L2 and Sinkhorn heatmap losses on a small grid.

# %%
import numpy as np

from btranspose.losses import (SinkhornParams, grid_cost_matrix, heatmap_mse, log_distribution, sinkhorn_loss,
                               sinkhorn_potentials, transport_plan)
from btranspose.tensor import Tensor, default_dtype

# %%
with default_dtype(np.float64):
    a = np.zeros((1, 1, 4, 4))
    b = np.zeros((1, 1, 4, 4))
    a[0, 0, 1, 1] = 1.0
    for col in range(4):
        b[...] = 0.0
        b[0, 0, 1, col] = 1.0
        l2 = heatmap_mse(Tensor(a), b).item()
        ot = sinkhorn_loss(Tensor(a), b, params=SinkhornParams(n_iters=50)).item()
        # L2 is flat once the peaks stop overlapping, transport grows with distance
        print(col, round(l2, 4), round(ot, 4))

# %%
with default_dtype(np.float64):
    rng = np.random.default_rng(0)
    p, q = rng.random((4, 4)), rng.random((4, 4))
    f, g = sinkhorn_potentials(log_distribution(Tensor(p)), log_distribution(Tensor(q)), SinkhornParams(n_iters=50))
    plan = transport_plan(f.data, g.data, 0.05)
print(np.abs(plan.sum(1) - (p / p.sum()).ravel()).max(), (plan * grid_cost_matrix(4, 4)).sum())
