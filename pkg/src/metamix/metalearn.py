"""Gradient-based meta-learners with optional MetaMix query regularization.

Four algorithms share one training loop:

* ``maml``: the outer loss is differentiated through the inner updates
  (second order).
* ``fomaml``: adapted parameters are detached, so the meta-gradient is the
  outer-loss gradient taken at the adapted point.
* ``meta_sgd``: per-parameter inner learning rates are meta-learned jointly
  with the initialization.
* ``mtl_lite``: a feature extractor is pre-trained on all training classes,
  frozen, and only a fresh N-way head is meta-learned.

With a :class:`~metamix.mixup.MixConfig` attached, each training episode is
mixed before adaptation; evaluation never mixes.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .autodiff import Node
from .episodes import ClassDataset, Episode, TaskDistribution, sample_episode
from .mixup import MixConfig, mix_for_episode, mix_set
from .models import FrozenSplit, MlpArchitecture, accuracy, cross_entropy, forward, init_params

logger = logging.getLogger(__name__)


class Algorithm(str, enum.Enum):
    MAML = "maml"
    FOMAML = "fomaml"
    META_SGD = "meta_sgd"
    MTL_LITE = "mtl_lite"


class NumericalError(ArithmeticError):
    """A non-finite loss was produced."""

    def __init__(self, message: str, episode_index: int | None = None, value: float | None = None):
        super().__init__(message)
        self.episode_index = episode_index
        self.value = value
        self.curve: list[CurvePoint] = []


@dataclass(frozen=True)
class MetaConfig:
    algorithm: Algorithm = Algorithm.MAML
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    inner_steps_train: int = 1
    inner_steps_eval: int = 5
    meta_batch: int = 4
    metamix: MixConfig | None = None
    # mtl_lite only
    mtl_meta_mix: bool = True
    pretrain_steps: int = 1000
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.inner_lr < 0 or self.outer_lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.inner_steps_train, self.inner_steps_eval, self.meta_batch) < 1:
            raise ValueError("inner steps and meta batch must be >= 1")
        if self.pretrain_steps < 0 or self.pretrain_batch < 1:
            raise ValueError("pretrain_steps must be >= 0 and pretrain_batch >= 1")

    @property
    def mixes_meta_phase(self) -> bool:
        if self.metamix is None:
            return False
        return self.algorithm is not Algorithm.MTL_LITE or self.mtl_meta_mix


# -- outer optimizer ----------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


@dataclass(frozen=True)
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def init(self, params: Mapping[str, np.ndarray]) -> AdamState:
        return AdamState({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})

    def update(
        self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
    ) -> tuple[dict[str, np.ndarray], AdamState]:
        t = state.t + 1
        m, v, new = dict(state.m), dict(state.v), dict(params)
        c1, c2 = 1.0 - self.beta1**t, 1.0 - self.beta2**t
        for k, g in grads.items():
            m[k] = self.beta1 * state.m[k] + (1.0 - self.beta1) * g
            v[k] = self.beta2 * state.v[k] + (1.0 - self.beta2) * g * g
            p = params[k] - self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)
            p.flags.writeable = False
            new[k] = p
        return new, AdamState(m, v, t)


# -- state --------------------------------------------------------------------

RATE_PREFIX = "rate:"


@dataclass(frozen=True)
class MetaState:
    params: dict[str, np.ndarray]
    opt: AdamState
    rates: dict[str, np.ndarray] | None = None
    frozen: FrozenSplit | None = None

    @property
    def trainable(self) -> tuple[str, ...]:
        return self.frozen.trainable if self.frozen else tuple(self.params)

    def meta_parameters(self) -> dict[str, np.ndarray]:
        """Everything the outer optimizer updates, keyed as in :class:`AdamState`."""
        out = {k: self.params[k] for k in self.trainable}
        if self.rates is not None:
            out.update({RATE_PREFIX + k: v for k, v in self.rates.items()})
        return out

    @classmethod
    def initial(cls, params: Mapping[str, np.ndarray], cfg: MetaConfig, frozen: FrozenSplit | None = None) -> MetaState:
        params = dict(params)
        if frozen is not None:
            frozen.check_covers(params)
        rates = None
        if cfg.algorithm is Algorithm.META_SGD:
            rates = {}
            for k, v in params.items():
                r = np.full_like(v, cfg.inner_lr)
                r.flags.writeable = False
                rates[k] = r
        partial = cls(params, AdamState({}, {}), rates, frozen)
        return dataclasses.replace(partial, opt=Adam(cfg.outer_lr).init(partial.meta_parameters()))


# -- inner loop ---------------------------------------------------------------


def support_loss(arch: MlpArchitecture, x: np.ndarray, y: np.ndarray) -> Callable[[Mapping[str, Node]], Node]:
    return lambda params: cross_entropy(forward(arch, params, x), y)


def inner_adapt(
    params: Mapping[str, object],
    loss_fn: Callable[[Mapping[str, Node]], Node],
    lr: float | Mapping[str, object],
    steps: int,
    differentiable: bool,
    trainable: Sequence[str] | None = None,
) -> dict[str, Node]:
    """``steps`` updates ``p <- p - lr * dL/dp`` on the ``trainable`` names.

    ``lr`` is a scalar or a per-parameter mapping (elementwise rates).  When
    ``differentiable`` the updates stay on the graph, so a later loss can be
    differentiated through them back to ``params`` (and to ``lr``).
    Otherwise the adapted parameters are fresh leaves.
    """
    current = {k: ad.constant(v) for k, v in params.items()}
    names = list(trainable) if trainable is not None else list(current)
    rates = None if np.isscalar(lr) else {k: ad.constant(lr[k]) for k in names}
    for _ in range(steps):
        with ad.enable_grad():
            loss = loss_fn(current)
        grads = ad.grad(loss, {k: current[k] for k in names}, create_graph=differentiable)
        if differentiable:
            for k in names:
                step = ad.mul(rates[k], grads[k]) if rates else ad.scale(grads[k], lr)
                current[k] = ad.sub(current[k], step)
        else:
            for k in names:
                g = grads[k].value
                step = rates[k].value * g if rates else lr * g
                current[k] = ad.Node(current[k].value - step)
    return current


def outer_loss(arch: MlpArchitecture, adapted: Mapping[str, Node], query_x: np.ndarray, query_y: np.ndarray) -> Node:
    """Soft-label cross-entropy of the adapted model on the (possibly mixed) query set."""
    return cross_entropy(forward(arch, adapted, query_x), query_y)


# -- outer loop ---------------------------------------------------------------


def meta_gradient(
    state: MetaState,
    arch: MlpArchitecture,
    episodes: Sequence[Episode],
    cfg: MetaConfig,
    mix_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed outer loss over ``episodes`` and its gradient w.r.t. the meta-parameters.

    Per-episode gradients are reduced in episode order.
    """
    if not episodes:
        raise ValueError("meta_gradient needs at least one episode")
    if cfg.mixes_meta_phase and mix_rng is None:
        raise ValueError("a mixing random stream is required when metamix is configured")
    first_order = cfg.algorithm is Algorithm.FOMAML
    trainable = state.trainable
    total_loss = 0.0
    total: dict[str, np.ndarray] = {}
    for i, episode in enumerate(episodes):
        if cfg.mixes_meta_phase:
            episode = mix_for_episode(episode, cfg.metamix, mix_rng)
        theta = {k: ad.Node(v) for k, v in state.params.items()}
        rates = {k: ad.Node(v) for k, v in state.rates.items()} if state.rates is not None else None
        adapted = inner_adapt(
            theta,
            support_loss(arch, episode.support_x, episode.support_y),
            rates if rates is not None else cfg.inner_lr,
            cfg.inner_steps_train,
            differentiable=not first_order,
            trainable=trainable,
        )
        loss = outer_loss(arch, adapted, episode.query_x, episode.query_y)
        value = float(loss.value)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite outer loss {value} at episode {i}", i, value)
        total_loss += value
        if first_order:
            wrt = {k: adapted[k] for k in trainable}
        else:
            wrt = {k: theta[k] for k in trainable}
            if rates is not None:
                wrt.update({RATE_PREFIX + k: r for k, r in rates.items()})
        for k, g in ad.grad(loss, wrt).items():
            total[k] = total[k] + g.value if k in total else g.value
    if first_order and state.rates is not None:
        total.update({RATE_PREFIX + k: np.zeros_like(v) for k, v in state.rates.items()})
    return total_loss, total


def meta_step(
    state: MetaState,
    arch: MlpArchitecture,
    episodes: Sequence[Episode],
    cfg: MetaConfig,
    mix_rng: np.random.Generator | None = None,
) -> tuple[MetaState, float]:
    """One Adam update of the meta-parameters from the summed batch loss."""
    loss, grads = meta_gradient(state, arch, episodes, cfg, mix_rng)
    updated, opt = Adam(cfg.outer_lr).update(state.meta_parameters(), grads, state.opt)
    params = dict(state.params)
    rates = dict(state.rates) if state.rates is not None else None
    for k, v in updated.items():
        if k.startswith(RATE_PREFIX):
            rates[k[len(RATE_PREFIX) :]] = v
        else:
            params[k] = v
    return MetaState(params, opt, rates, state.frozen), loss


# -- MTL-lite pre-training ------------------------------------------------------


def _training_pool(dataset: ClassDataset) -> tuple[np.ndarray, np.ndarray]:
    ids = dataset.split["train"]
    if not ids:
        raise ValueError("training split is empty")
    x = np.concatenate([dataset.features[c] for c in ids])
    labels = np.concatenate([np.full(len(dataset.features[c]), j) for j, c in enumerate(ids)])
    return x, labels


def pretrain_classifier(
    dataset: ClassDataset,
    arch: MlpArchitecture,
    cfg: MetaConfig,
    use_mixup: bool,
    seed: int,
) -> tuple[dict[str, np.ndarray], float]:
    """Plain M-way mini-batch classification over every training class.

    Returns the M-way parameters and their accuracy on the training pool.
    """
    x, labels = _training_pool(dataset)
    num_classes = len(dataset.split["train"])
    pre_arch = arch.with_output_dim(num_classes)
    onehot = np.eye(num_classes)[labels]
    rng = np.random.default_rng(seed)
    params = init_params(pre_arch, int(rng.integers(2**63)))
    mix_cfg = cfg.metamix or MixConfig()
    opt = Adam(cfg.pretrain_lr)
    opt_state = opt.init(params)
    batch = min(cfg.pretrain_batch, len(x))
    for _ in range(cfg.pretrain_steps):
        rows = rng.choice(len(x), size=batch, replace=False)
        bx, by = x[rows], onehot[rows]
        if use_mixup:
            bx, by = mix_set(bx, by, mix_cfg, rng)
        leaves = {k: ad.Node(v) for k, v in params.items()}
        loss = cross_entropy(forward(pre_arch, leaves, bx), by)
        grads = {k: g.value for k, g in ad.grad(loss, leaves).items()}
        params, opt_state = opt.update(params, grads, opt_state)
    return params, accuracy(pre_arch, params, x, labels)


def transfer_head(
    pre_params: Mapping[str, np.ndarray], arch: MlpArchitecture, seed: int
) -> tuple[dict[str, np.ndarray], FrozenSplit]:
    """Drop the M-way output layer, freeze the rest and append a fresh N-way head."""
    last = arch.num_layers - 1
    head_names = (f"layer{last}.weight", f"layer{last}.bias")
    head = init_params(arch, seed)
    params = {k: (head[k] if k in head_names else pre_params[k]) for k in arch.param_shapes()}
    frozen = tuple(k for k in params if k not in head_names)
    return params, FrozenSplit(frozen=frozen, trainable=head_names)


def mtl_pretrain(
    dataset: ClassDataset,
    arch: MlpArchitecture,
    cfg: MetaConfig,
    use_mixup: bool,
    seed: int,
) -> tuple[dict[str, np.ndarray], FrozenSplit]:
    """Pre-train on all training classes, then :func:`transfer_head`."""
    pre_params, acc = pretrain_classifier(dataset, arch, cfg, use_mixup, seed)
    logger.info("mtl pretrain accuracy %.4f over %d classes", acc, len(dataset.split["train"]))
    return transfer_head(pre_params, arch, seed + 1)


# -- evaluation ---------------------------------------------------------------


def ci95_halfwidth(accuracies: Sequence[float]) -> float:
    """``1.96 * s / sqrt(n)`` with ``s`` the n-1 sample standard deviation."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2 or np.all(acc == acc[0]):
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


@dataclass(frozen=True)
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    num_episodes: int
    per_episode_accuracy: tuple[float, ...]
    config_fingerprint: str = ""
    seconds: float = 0.0

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[float], **extra) -> EvalReport:
        acc = tuple(float(a) for a in accuracies)
        return cls(float(np.mean(acc)) if acc else 0.0, ci95_halfwidth(acc), len(acc), acc, **extra)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_episode_accuracy"] = list(self.per_episode_accuracy)
        return d


def adaptation_rate(state: MetaState, cfg: MetaConfig):
    return state.rates if state.rates is not None else cfg.inner_lr


def evaluate(
    state: MetaState,
    arch: MlpArchitecture,
    dist: TaskDistribution,
    num_episodes: int,
    cfg: MetaConfig,
    seed: int,
) -> EvalReport:
    """Fine-tune on each episode's support set, score argmax accuracy on its query set."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    lr = adaptation_rate(state, cfg)
    accs = []
    for _ in range(num_episodes):
        ep = sample_episode(dist, rng)
        adapted = inner_adapt(
            state.params,
            support_loss(arch, ep.support_x, ep.support_y),
            lr,
            cfg.inner_steps_eval,
            differentiable=False,
            trainable=state.trainable,
        )
        accs.append(accuracy(arch, adapted, ep.query_x, ep.query_labels))
    return EvalReport.from_accuracies(accs, seconds=time.perf_counter() - started)


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    train_loss: float | None
    val_accuracy: float | None
    val_ci95: float | None


@dataclass
class TrainResult:
    state: MetaState
    curve: list[CurvePoint]
    best_iteration: int
    pretrain_accuracy: float | None = None
    evaluations: list[EvalReport] = field(default_factory=list)


def initial_state(
    arch: MlpArchitecture, cfg: MetaConfig, train_dist: TaskDistribution, seed: int
) -> tuple[MetaState, float | None]:
    if cfg.algorithm is Algorithm.MTL_LITE:
        pre_seed = rngs.derived_seed(seed, "pretrain")
        pre_params, acc = pretrain_classifier(train_dist.pool, arch, cfg, cfg.metamix is not None, pre_seed)
        params, frozen = transfer_head(pre_params, arch, pre_seed + 1)
        return MetaState.initial(params, cfg, frozen), acc
    return MetaState.initial(init_params(arch, rngs.derived_seed(seed, "init")), cfg), None


def train(
    arch: MlpArchitecture,
    cfg: MetaConfig,
    train_dist: TaskDistribution,
    val_dist: TaskDistribution | None,
    iterations: int,
    eval_every: int,
    val_episodes: int,
    seed: int,
    state: MetaState | None = None,
) -> TrainResult:
    """Meta-train for ``iterations`` batches and keep the best-validation state.

    Validation runs at iteration 0, every ``eval_every`` iterations and at the
    end, always on the same episodes.  Ties keep the earliest iteration.
    Without a ``val_dist`` the curve carries losses only and the final state
    is returned.
    """
    pretrain_acc = None
    if state is None:
        state, pretrain_acc = initial_state(arch, cfg, train_dist, seed)
    episode_rng = rngs.stream(seed, "episodes")
    mix_rng = rngs.stream(seed, "mixing") if cfg.mixes_meta_phase else None
    val_seed = rngs.derived_seed(seed, "val")

    curve: list[CurvePoint] = []
    evaluations: list[EvalReport] = []

    def checkpoint(iteration: int, loss: float | None) -> float | None:
        if val_dist is None:
            curve.append(CurvePoint(iteration, loss, None, None))
            return None
        report = evaluate(state, arch, val_dist, val_episodes, cfg, val_seed)
        evaluations.append(report)
        curve.append(CurvePoint(iteration, loss, report.mean_accuracy, report.ci95_halfwidth))
        return report.mean_accuracy

    best_acc, best_iter, best_state = checkpoint(0, None), 0, state
    for it in range(1, iterations + 1):
        batch = [sample_episode(train_dist, episode_rng) for _ in range(cfg.meta_batch)]
        try:
            state, loss = meta_step(state, arch, batch, cfg, mix_rng)
        except NumericalError as exc:
            exc.curve = list(curve)
            raise
        if it % eval_every == 0 or it == iterations:
            acc = checkpoint(it, loss)
            if val_dist is None or acc > best_acc:
                best_acc, best_iter, best_state = acc, it, state
    return TrainResult(best_state, curve, best_iter, pretrain_acc, evaluations)
