# %% [markdown]
# A short desk-scale training run, then OKS/AP on held-out samples.

# %%
from btranspose.model import build_model, tiny_spec
from btranspose.synth import generate_dataset
from btranspose.train import TrainConfig, evaluate, fit_to_model, loss_ratio, train

# %%
spec = tiny_spec("C3A1(4)", input_size=(64, 48), widths=(8, 12, 16, 32), d_model=32, d_ffn=64, enc_heads=2)
train_set, factor = fit_to_model(generate_dataset(64, seed=1), spec)
print("downscale", factor)

# %%
model = build_model(spec, seed=0)
cfg = TrainConfig(batch_size=16, steps=60, base_lr=1e-3, lr_steps=(), augment=False)
res = train(model, train_set, cfg, log=lambda r: r["step"] % 10 or print(r["step"], round(r["loss"], 5)))
print("loss ratio", round(loss_ratio(res.losses(), 10), 3))

# %%
rep = evaluate(model, generate_dataset(16, seed=2))
print("AP", round(rep.ap["AP"], 3), "AR", round(rep.ap["AR"], 3), "mean OKS", round(rep.mean_oks, 3))
