"""Mix the query set of one episode and look at what the outer loop sees."""

import numpy as np

from metamix.episodes import TaskDistribution, generate_synthetic, sample_episode
from metamix.mixup import LambdaScope, MixConfig, MixTarget, interpolate, mix_for_episode, sample_beta

rng = np.random.default_rng(42)

# interpolation weights come from Beta(a, a); small a pushes them toward 0 and 1
for a in (0.2, 1.0, 8.0):
    lam = sample_beta(a, rng, size=20000)
    print(f"Beta({a}, {a}): mean {lam.mean():.3f}, var {lam.var():.4f}, share in [0.1, 0.9] {np.mean((lam > 0.1) & (lam < 0.9)):.2f}")

# a convex combination of two points and two one-hot labels
x = interpolate(np.array([[0.0, 4.0]]), np.array([[2.0, 0.0]]), 0.25)
y = interpolate(np.eye(3)[[0]], np.eye(3)[[2]], 0.25)
print("mixed point", x, "mixed label", y)

data = generate_synthetic(num_classes=25, per_class=20, dim=16, spread=0.7, seed=1)
episode = sample_episode(TaskDistribution(data, "train", 5, 1, 4), rng)

# default: one shared weight per episode, query rows mixed with a permuted copy
mixed = mix_for_episode(episode, MixConfig(), rng)
print("support untouched:", np.array_equal(mixed.support_x, episode.support_x))
print("first query labels before:\n", episode.query_y[:3])
print("after:\n", np.round(mixed.query_y[:3], 3))
print("label mass per row:", np.round(mixed.query_y.sum(axis=1), 12)[:5])

# one weight per pair instead, mixing both sets
both = mix_for_episode(episode, MixConfig(target=MixTarget.BOTH, lambda_scope=LambdaScope.PER_PAIR), rng)
print("distinct top weights per row:", np.unique(np.round(both.query_y.max(axis=1), 3)).size)
