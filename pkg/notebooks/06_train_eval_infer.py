# %% [markdown]
# # Train, evaluate and run inference through the CLI
#
# A short 64-bit run on a synthetic toy set; resume continues bit-exactly.

# %%
import json
import tempfile
from pathlib import Path

import yaml

from smokenet import data
from smokenet.cli import main

root = Path(tempfile.mkdtemp())
samples = data.synthetic_samples(6, 64, seed=1)
data.write_dataset(root / "ds", samples[:4], "train")
data.write_dataset(root / "ds", samples[4:5], "val")
manifest = data.write_dataset(root / "ds", samples[5:], "test")

cfg = {
    "precision": 64,
    "data": {"manifest": str(manifest), "image_size": 64, "batch_size": 2},
    "schedule": {"total_epochs": 4},
    "train": {"epochs": 4},
    "eval": {"fps_iters": 3, "fps_warmup": 1},
}
(root / "cfg.yaml").write_text(yaml.safe_dump(cfg))

# %%
main(["train", "--config", str(root / "cfg.yaml"), "--out", str(root / "run")])

# %%
main(["eval", "--config", str(root / "cfg.yaml"), "--out", str(root / "run"), "-q"])
print(json.loads((root / "run" / "report.json").read_text())["miou"])

# %%
image = root / "ds" / "images" / "synthetic-0005.png"
main(["infer", "--config", str(root / "cfg.yaml"), "--out", str(root / "pred"), "--checkpoint", str(root / "run" / "best.ckpt"), str(image), "-q"])
print(sorted(p.name for p in (root / "pred").glob("*.png")))
