# %% [markdown]
# # Losses and learning-rate schedule

# %%
import math

import numpy as np

from smokenet.losses import LossConfig, bce_loss, combined_loss, dice_loss, layer_wise_loss
from smokenet.model import ModelOutput
from smokenet.optim import ScheduleConfig, cosine_lr
from smokenet.tensor_core import Tensor

rng = np.random.default_rng(0)
y = (rng.random((2, 1, 8, 8)) > 0.5).astype(float)
p = rng.uniform(0.05, 0.95, y.shape)

# %%
print("bce(0.5) - ln 2 =", bce_loss(np.full_like(y, 0.5), y).item() - math.log(2))
print("dice(y, y) =", dice_loss(y, y).item())
print("combined =", combined_loss(p, y).item())
same = ModelOutput(Tensor(p), [(s, Tensor(p)) for s in range(2, 7)])
print("layer-wise / combined with identical aux masks =", layer_wise_loss(same, y).item() / combined_loss(p, y).item())
print("without deep supervision:", layer_wise_loss(same, y, LossConfig(gamma=(0,) * 5)).item())

# %%
for t in (0, 25, 50, 75, 100):
    print(f"epoch {t:3d}  lr {cosine_lr(t):.6e}")
alt = ScheduleConfig(eta_min=1e-5, total_epochs=50)
print("alternative setting end:", cosine_lr(50, alt))
