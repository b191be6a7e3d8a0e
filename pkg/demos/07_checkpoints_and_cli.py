# %% [markdown]
# Checkpoint files and the command line.

# %%
import struct
import subprocess
import sys

from btranspose.checkpoint import load_checkpoint, save_checkpoint
from btranspose.model import build_model, tiny_spec

# %%
model = build_model(tiny_spec("C2A1(4)"), seed=0)
path = save_checkpoint(model, "tiny.btrw", step=12)
raw = path.read_bytes()
print(raw[:4], struct.unpack_from("<IBH", raw, 4))
back, ckpt = load_checkpoint(path)
print(ckpt.descriptor, ckpt.step, len(ckpt.tensors))

# %%
cfg = "n_samples = 4\nseed = 7\n"
open("synth.cfg", "w").write(cfg)
subprocess.run([sys.executable, "-m", "btranspose", "synth", "--config", "synth.cfg", "--out", "demo_data"], check=True)
