# %% [markdown]
# # Ablation profile
#
# Parameter and FLOP counts for the eight variants: conv block N (plain 3x3)
# or M (multiscale), loss F (final only) or L (layer-wise), attention NA
# (single spatial softmax) or MA (multiview). Loss choice only adds auxiliary
# heads, which the count leaves out.

# %%
from smokenet.config import RunConfig
from smokenet.runner import component_shares, profile_rows, profile_table

rows = profile_rows(RunConfig())
print(profile_table(rows))

# %%
for name, share in component_shares(rows[-1]["by_layer"])[:8]:
    print(f"{name:<12}{100 * share:6.2f} %")
