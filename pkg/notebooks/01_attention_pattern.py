# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Who attends to whom
#
# A re-ranking context holds the query block followed by K gallery blocks,
# each made of L descriptor tokens and one separator.  Ordinary tokens see a
# band of neighbours; query tokens and separators see, and are seen by,
# every token.  This walk-through draws that mask for a tiny context, checks
# the fast kernel against the explicit one, and counts operations as the
# context grows.

# +
import numpy as np

from locore.attention import (
    AttentionLayerParams,
    AttentionPattern,
    build_pattern,
    dense_flop_breakdown,
    dense_reference_attention,
    flop_count,
    sparse_attention,
)
from locore.numerics import Var
from locore.sequence import token_meta
# -

# + tags=["parameters"]
L, K, radius = 3, 3, 2
# -

# Each row below is a query position; `#` marks a key it may read.

# +
meta = token_meta(L, K, [L] * (K + 1))
pattern = build_pattern(meta, radius)
mask = pattern.dense_mask()
roles = "QGS"
for i, row in enumerate(mask):
    tag = roles[int(meta.role[i])]
    print(f"{i:2d} {tag} " + "".join("#" if a else "." for a in row))
print("global tokens:", list(pattern.global_indices))
# -

# The gathered kernel never builds that matrix.  Its output still matches
# the explicit masked softmax to rounding error.

# +
rng = np.random.default_rng(0)
h, heads = 8, 2
names = ("wq", "bq", "wk", "bk", "wv", "bv", "wqg", "bqg", "wkg", "bkg", "wvg", "bvg", "wo", "bo")
params = AttentionLayerParams(heads, *(Var(0.5 * rng.standard_normal((h, h) if n[0] == "w" else h)) for n in names))
x = Var(rng.standard_normal((pattern.M, h)))
fast = sparse_attention(x, params, pattern).value
slow = dense_reference_attention(x, params, mask, pattern.global_indices, pattern.padding_indices)
print("max abs difference:", np.abs(fast - slow).max())
# -

# ## Cost as the context doubles
#
# With a fixed band and a global set that grows with M, the sparse count
# roughly doubles.  The quadratic score term of full attention quadruples.

# +
prev = None
for M in (512, 1024, 2048, 4096):
    pat = AttentionPattern.banded(M, 256, np.arange(0, M, 32))
    sparse = flop_count(pat, 512, 8)
    pairs = dense_flop_breakdown(M, 512, 8)["pairs"]
    growth = "" if prev is None else f"  x{sparse / prev[0]:.2f} sparse, x{pairs / prev[1]:.2f} dense pairs"
    print(f"M={M:5d}  sparse {sparse / 1e9:7.2f} GFLOP  dense pairs {pairs / 1e9:8.2f} GFLOP{growth}")
    prev = (sparse, pairs)
# -
