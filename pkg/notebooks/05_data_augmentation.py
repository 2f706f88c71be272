# %% [markdown]
# # Data pipeline
#
# Manifests are JSON lines of (image_path, mask_path, split). Masks threshold at
# 128. Geometric augmentations move image and mask together; photometric ones
# (brightness, fog, motion blur) touch the image only.

# %%
import tempfile
from pathlib import Path

import numpy as np

from smokenet import data

tmp = Path(tempfile.mkdtemp())
manifest = data.write_dataset(tmp, data.synthetic_samples(3, 64, seed=0))
refs = data.load_manifest(manifest, "train")
sample = data.load_sample(refs[0], (64, 64))
print(len(refs), "samples;", sample.image.shape, sample.mask.shape, "smoke fraction", sample.mask.mean())

# %%
print("fog 0.5 on (0.2, 0.4, 0.6):", data.apply_fog(np.array([0.2, 0.4, 0.6]).reshape(3, 1, 1), 0.5).ravel())
print(data.motion_blur_kernel(5, 45.0))

# %%
cfg = data.AugmentConfig(seed=3)
for epoch in range(4):
    aug = data.augment(sample, cfg, data.sample_rng(cfg.seed, sample.id, epoch))
    print(epoch, [e["op"] for e in aug.augmentation_log])

# %%
for images, masks in data.make_batches([sample] * 5, 2, shuffle_seed=[0, 0]):
    print(images.shape, masks.shape)
