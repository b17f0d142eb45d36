# %% [markdown]
# # Tape autodiff and the two-tower layer
#
# Everything in `dgt` runs on a small reverse-mode tape over float64 numpy
# arrays. This walk-through differentiates a toy expression, checks it
# against central differences, then pushes random inputs through one
# two-tower attention layer.

# %%
import numpy as np

from dgt import tensor as tn
from dgt.model import ModelConfig, init_params, two_tower_layer

rng = np.random.default_rng(0)

# %% [markdown]
# ## A scalar loss and its gradient
# Ops called while a `Tape` is open are recorded; `backward` replays them in reverse.

# %%
x = tn.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = tn.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

with tn.Tape() as tape:
    loss = tn.sum_(tn.softplus(tn.matmul(x, w)))
grads = tn.backward(tape, loss, {"x": x, "w": w})
print("loss", loss.item())
print("dL/dw\n", grads["w"])

# %%
def f(wv):
    return np.logaddexp(0.0, x.data @ wv).sum()

h = 1e-5
num = np.zeros_like(w.data)
for i in np.ndindex(w.shape):
    up, dn = w.data.copy(), w.data.copy()
    up[i] += h
    dn[i] -= h
    num[i] = (f(up) - f(dn)) / (2 * h)
print("max |analytic - numeric|:", np.abs(grads["w"] - num).max())

# %% [markdown]
# ## Stop-gradient
# `stop_grad` keeps the value and cuts the path, so `b` below gets nothing.

# %%
a = tn.Tensor(rng.normal(size=3), requires_grad=True)
b = tn.Tensor(rng.normal(size=3), requires_grad=True)
with tn.Tape() as tape:
    loss = tn.sq_frobenius(a - tn.stop_grad(b))
g = tn.backward(tape, loss, {"a": a, "b": b})
print("grad a", g["a"], "grad b", g["b"])

# %% [markdown]
# ## One two-tower layer
# Targets attend only to contexts and contexts only to targets. The same
# weights serve both directions. The attention bias here is random; in the
# model it comes from the temporal and distance encodings.

# %%
cfg = ModelConfig(num_nodes=10, T=3, d=8, num_layers=1, num_heads=2,
                  dropout_hidden=0.0, dropout_attn=0.0)
params = init_params(cfg, seed=0)
H_tgt, H_ctx = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
bias = rng.normal(size=(3, 5))

out_t, out_c = two_tower_layer(params, 0, tn.Tensor(H_tgt), tn.Tensor(H_ctx),
                               tn.Tensor(bias), tn.Tensor(bias.T), cfg)
print("targets", out_t.shape, "contexts", out_c.shape)
print("relative change from the input:",
      np.linalg.norm(out_t.data - H_tgt) / np.linalg.norm(H_tgt))
