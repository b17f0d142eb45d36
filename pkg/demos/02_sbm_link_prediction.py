# %% [markdown]
# # Link prediction on a dynamic block model
#
# Generate a 60-node, 3-block sequence of 7 snapshots, train on the first 6
# and predict the links of the 7th. This is the setup `tests/desk.py` uses;
# the two training runs take a couple of minutes on one core.

# %%
import numpy as np

from dgt.evaluation import evaluate, noisy_history
from dgt.graph import GraphViews, build_union, synth_dynamic_sbm
from dgt.model import ModelConfig
from dgt.sampler import joint_ppr, select_context_topk
from dgt.trainer import TrainConfig, finetune, pretrain

s = synth_dynamic_sbm(60, 3, 7, p_in=0.3, p_out=0.02, persist=0.8, seed=0)
print([len(s.edges(t)) for t in range(1, 8)], "edges per snapshot")

# %% [markdown]
# ## Temporal union and context selection
# The union keeps each edge once with a presence bit per step. Contexts for a
# batch are the nodes with the highest summed PPR score from its targets.

# %%
u = build_union(s.prefix(6))
print(u.num_edges, "union edges; presence matrix", u.exists.shape)

targets = [0, 1, 20, 41]
scores = joint_ppr(u, targets)
batch = select_context_topk(scores, targets, K=8)
print("contexts", batch.contexts)

# %%
views = GraphViews(s.prefix(6), 6, 5)
enc = views.without(3).pair_indices(targets, batch.contexts)
rows = set(np.unique(enc.tc_index).tolist()) - {0}
print("temporal rows used with step 3 hidden:", sorted(rows))

# %% [markdown]
# ## Pre-train, fine-tune, evaluate

# %%
mc = ModelConfig(num_nodes=60, T=6, d=16, num_layers=2, num_heads=2,
                 dropout_hidden=0.1, dropout_attn=0.1)
cfg = TrainConfig(model=mc, lr=1e-2, epochs_pretrain=50, epochs_finetune=30,
                  finetune_steps_per_epoch=10, num_pos=10, neg_ratio=1, batch_size=16, seed=0)

train = s.prefix(6)
pre = pretrain(train, cfg)
print("recon loss every 10 epochs:", [round(h["val_metric"], 3) for h in pre.history[::10]])
ft = finetune(train, cfg, start=pre)
report = evaluate(ft, s, t_star=7, seed=0)
print("Micro-AUC on G_7:", round(report.micro_auc, 3))

# %% [markdown]
# ## Noisy history
# Flip half of the candidate pairs in every training snapshot and retrain.

# %%
noisy = noisy_history(s, 7, 0.5, seed=[0, 31])
ft_noisy = finetune(noisy.prefix(6), cfg, start=pretrain(noisy.prefix(6), cfg))
print("Micro-AUC with noise 0.5:", round(evaluate(ft_noisy, noisy, 7, seed=0).micro_auc, 3))
