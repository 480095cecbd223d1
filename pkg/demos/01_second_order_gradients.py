"""Walk through the autodiff engine: a gradient of a gradient, then a MAML meta-gradient checked numerically."""

import numpy as np

from metamix import autodiff as ad
from metamix.episodes import TaskDistribution, generate_synthetic, sample_episode
from metamix.metalearn import Algorithm, MetaConfig, MetaState, inner_adapt, meta_gradient, outer_loss, support_loss
from metamix.models import MlpArchitecture, init_params

# f(w) = w^3, so f'(2) = 12 and f''(2) = 12
w = ad.Node(2.0)
d1 = ad.grad(w * w * w, w, create_graph=True)  # keep the graph so d1 is differentiable
d2 = ad.grad(d1, w)
print("f'(2) =", float(d1.value), " f''(2) =", float(d2.value))

# a 16-32-5 network and one 5-way/1-shot episode
arch = MlpArchitecture(16, (32,), 5)
theta = init_params(arch, seed=0)
data = generate_synthetic(num_classes=25, per_class=20, dim=16, spread=0.7, seed=0)
episode = sample_episode(TaskDistribution(data, "train", n_way=5, k_shot=1, n_query=16), np.random.default_rng(0))
print("support", episode.support_x.shape, "query", episode.query_x.shape)

# the MAML meta-gradient differentiates through one inner step
cfg = MetaConfig(Algorithm.MAML, inner_lr=0.1)
loss, g = meta_gradient(MetaState.initial(theta, cfg), arch, [episode], cfg)
print(f"query loss after adaptation {loss:.4f}")
for name, value in g.items():
    print(f"  d loss / d {name:14s} norm {np.linalg.norm(value):.4e}")


def adapted_query_loss(p):
    adapted = inner_adapt(p, support_loss(arch, episode.support_x, episode.support_y), 0.1, 1, differentiable=True)
    return outer_loss(arch, adapted, episode.query_x, episode.query_y)


# central differences agree with the analytic second-order gradient
errors = ad.finite_diff_check(adapted_query_loss, theta)
print("worst relative error vs finite differences:", f"{max(errors.values()):.2e}")

# first-order MAML drops the second-order term; the update changes but stays close
fo = MetaConfig(Algorithm.FOMAML, inner_lr=0.1)
_, g_fo = meta_gradient(MetaState.initial(theta, fo), arch, [episode], fo)
gap = max(np.abs(g[k] - g_fo[k]).max() for k in theta)
print(f"largest MAML vs FOMAML gradient gap {gap:.3e}")
