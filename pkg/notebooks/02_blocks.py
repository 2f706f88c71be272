# %% [markdown]
# # Encoder blocks
#
# Multiscale stage: four channel chunks (identity, 1x1, factorized, dilated
# factorized), per-chunk batch norm, optional 1x1 projection when the width
# changes, ReLU, 2x2 max-pool.
#
# Multiview stage: chunk 1 passes through; chunks 2-4 are gated by a softmax
# over (H, W), (C, H) and (C, W) respectively; then 1x1 conv, layer norm, GELU,
# pool.

# %%
import numpy as np

from smokenet.blocks import MultiscaleStage, MultiscaleStageSpec, MultiviewStage, MultiviewStageSpec
from smokenet.tensor_core import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 8, 16, 16)))

# %%
ms = MultiscaleStage(MultiscaleStageSpec(8, 16, "3x5", 2), rng=rng, dtype=np.float64)
print("multiscale", x.shape, "->", ms(x).shape)
print("projection present:", ms.proj is not None)
for i, b in enumerate(ms.branches(x)):
    print(f"  branch {i}: {b.shape}")

# %%
mv = MultiviewStage(MultiviewStageSpec(8, 16), rng=rng, dtype=np.float64)
print("multiview", x.shape, "->", mv(x).shape)
views = mv.views(Tensor(np.full((1, 8, 4, 6), 0.7)))
print("uniform input, gated value per view:", [float(v.data.flat[0]) for v in views])
