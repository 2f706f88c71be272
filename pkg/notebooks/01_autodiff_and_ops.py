# %% [markdown]
# # Autodiff core and convolution ops
#
# Tensors record a backward closure per op. `backward()` walks the graph in
# reverse topological order and frees it unless `retain_graph=True`.

# %%
import numpy as np

from smokenet import tensor_core as tc
from smokenet.gradcheck import check_gradients, format_report, run_suite
from smokenet.tensor_core import ConvKernel, Tensor

rng = np.random.default_rng(0)

# %%
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
y = tc.conv2d(x, w, padding=1)
loss = (y * y).mean()
loss.backward()
print("output", y.shape, "dL/dw", w.grad.shape)

# %% [markdown]
# A 3x1 conv after a 1x3 conv is the same map as one 3x3 conv whose kernel is
# the outer product of the two 1-D kernels.

# %%
col, row = rng.standard_normal(3), rng.standard_normal(3)
img = Tensor(rng.standard_normal((1, 1, 8, 8)))
vertical = ConvKernel(Tensor(col.reshape(1, 1, 3, 1)), padding=(1, 0))
horizontal = ConvKernel(Tensor(row.reshape(1, 1, 1, 3)), padding=(0, 1))
factored = tc.sequential_factorized_conv(img, vertical, horizontal)
direct = tc.conv2d(img, Tensor(np.outer(col, row)[None, None]), padding=1)
print("max |difference|", np.abs(factored.data - direct.data).max())

# %% [markdown]
# Transposed conv is the adjoint of conv: <conv(x), y> == <x, convT(y)>.

# %%
k = Tensor(rng.standard_normal((4, 3, 3, 3)))  # (C_in, C_out, kh, kw) for the transposed op
a = Tensor(rng.standard_normal((1, 4, 5, 5)))
b = Tensor(rng.standard_normal((1, 3, 10, 10)))
up = tc.transposed_conv2d(a, k, None, 2, 1, 1)
down = tc.conv2d(b, k, stride=2, padding=1)
print(float((up.data * b.data).sum()), float((a.data * down.data).sum()))

# %% [markdown]
# Axis-set softmax, as used by the attention gates.

# %%
s = tc.softmax_axes(Tensor(rng.standard_normal((1, 2, 3, 4))), ("C", "H"))
print("sums over (C, H):", s.data.sum(axis=(1, 2)).ravel())

# %% [markdown]
# Finite-difference checks: single op, then a few seeds of the full suite.

# %%
xs = [Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)]
print("gelu rel err", check_gradients(lambda t: tc.gelu(t).sum(), xs, rng))
print(format_report(run_suite(seeds=2, only=["conv2d", "softmax_hw", "multiview_block"])))
