# %% [markdown]
# # Full model, channel table, parameter and FLOP audit

# %%
import numpy as np

from smokenet import ModelConfig, build, count_params
from smokenet.metrics import estimate_flops
from smokenet.model import forward

cfg = ModelConfig(precision=64)
model = build(cfg, seed=0)

# %%
print(f"{'stage':>5} {'encoder':>11} {'in':>4} {'out':>4} {'scale':>6} {'dec out':>8}")
for r in cfg.channel_table():
    print(f"{r['stage']:>5} {r['encoder']:>11} {r['in_ch']:>4} {r['out_ch']:>4} {'1/' + str(r['scale']):>6} {r['decoder_out_ch']:>8}")

# %%
out = forward(model, np.random.default_rng(0).random((1, 3, 64, 64)))
print("mask", out.mask.shape, "aux", [(s, m.shape) for s, m in out.aux_masks])

# %%
print("parameters (inference):", count_params(model))
print("parameters (with aux heads):", count_params(model, include_aux=True))
by_top = {}
for name, p in model.named_parameters():
    key = ".".join(name.split(".")[:2]) if name.split(".")[0] in ("encoder", "decoder", "skips", "aux") else name.split(".")[0]
    by_top[key] = by_top.get(key, 0) + p.size
for k, v in by_top.items():
    print(f"  {k:<12}{v:>8}")

# %%
report = estimate_flops(model, (1, 3, 256, 256))
print(f"FLOPs at 256x256: {report.total / 1e6:.2f} M")
for op, f in sorted(report.by_op.items(), key=lambda kv: -kv[1]):
    print(f"  {op:<20}{f / 1e6:8.2f} M")
