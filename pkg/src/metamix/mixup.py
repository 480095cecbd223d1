"""Mixup virtual examples for episodes.

Each example is paired with a partner drawn by a random permutation of its
own set, and both features and labels are replaced by
``lam * own + (1 - lam) * partner`` with ``lam ~ Beta(alpha, alpha)``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from .episodes import Episode


class MixTarget(str, enum.Enum):
    QUERY = "query"
    SUPPORT = "support"
    BOTH = "both"


class LambdaScope(str, enum.Enum):
    PER_EPISODE = "per_episode"
    PER_PAIR = "per_pair"


@dataclass(frozen=True)
class MixConfig:
    alpha_check: float = 1.0
    target: MixTarget = MixTarget.QUERY
    lambda_scope: LambdaScope = LambdaScope.PER_EPISODE
    fixed_lambda: float | None = None  # overrides sampling; for endpoint checks

    def __post_init__(self):
        if not self.alpha_check > 0:
            raise ValueError(f"alpha_check must be positive, got {self.alpha_check}")
        object.__setattr__(self, "target", MixTarget(self.target))
        object.__setattr__(self, "lambda_scope", LambdaScope(self.lambda_scope))
        if self.fixed_lambda is not None and not 0 <= self.fixed_lambda <= 1:
            raise ValueError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")


def sample_beta(alpha_check: float, rng: np.random.Generator, size=None):
    """``Beta(alpha, alpha)`` draws as ``g1 / (g1 + g2)`` with ``g1, g2 ~ Gamma(alpha, 1)``."""
    if not alpha_check > 0:
        raise ValueError(f"alpha_check must be positive, got {alpha_check}")
    g1 = rng.standard_gamma(alpha_check, size=size)
    g2 = rng.standard_gamma(alpha_check, size=size)
    total = g1 + g2
    # Both gammas can underflow to 0 for tiny alpha; the limit law puts mass 1/2 on each end.
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(total > 0, g1 / np.where(total > 0, total, 1.0), 0.5)
    return float(lam) if size is None else lam


def _weights(lam):
    """Own/partner weights summing to exactly 1, with ``_weights(1 - lam)`` the exact swap.

    ``1 - w`` is exact for ``w`` in [0.5, 1], so the larger weight is always
    the one taken as given.
    """
    lam = np.asarray(lam, dtype=np.float64)
    comp = 1.0 - lam
    big = lam >= 0.5
    own = np.where(big, lam, 1.0 - comp)
    return own, comp


def interpolate(a: np.ndarray, b: np.ndarray, lam) -> np.ndarray:
    """``lam * a + (1 - lam) * b`` row-wise, clipped into the segment between ``a`` and ``b``.

    ``lam`` is a scalar or one value per row.
    """
    own, partner = _weights(lam)
    if own.ndim:
        own, partner = own[:, None], partner[:, None]
    mixed = own * a + partner * b
    return np.clip(mixed, np.minimum(a, b), np.maximum(a, b))


def mix_set(
    x: np.ndarray,
    y: np.ndarray,
    cfg: MixConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix a labeled set with a shuffled copy of itself; cardinality is preserved."""
    n = len(x)
    if n == 0:
        raise ValueError("cannot mix an empty set")
    if len(y) != n:
        raise ValueError(f"features and labels disagree in length: {n} vs {len(y)}")
    partner = rng.permutation(n)
    if cfg.fixed_lambda is not None:
        lam = cfg.fixed_lambda
    elif cfg.lambda_scope is LambdaScope.PER_PAIR:
        lam = sample_beta(cfg.alpha_check, rng, size=n)
    else:
        lam = sample_beta(cfg.alpha_check, rng)
    x_hat = interpolate(x, x[partner], lam)
    y_hat = interpolate(y, y[partner], lam)
    x_hat.flags.writeable = False
    y_hat.flags.writeable = False
    return x_hat, y_hat


def mix_for_episode(episode: Episode, cfg: MixConfig, rng: np.random.Generator) -> Episode:
    """Replace the configured set(s) by mixed copies.  Support is drawn before query."""
    changes = {}
    if cfg.target in (MixTarget.SUPPORT, MixTarget.BOTH):
        changes["support_x"], changes["support_y"] = mix_set(episode.support_x, episode.support_y, cfg, rng)
    if cfg.target in (MixTarget.QUERY, MixTarget.BOTH):
        changes["query_x"], changes["query_y"] = mix_set(episode.query_x, episode.query_y, cfg, rng)
    return dataclasses.replace(episode, **changes)
