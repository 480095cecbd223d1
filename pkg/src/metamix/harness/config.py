"""Experiment configuration: flat ``key = value`` text with ``[section]`` headers.

Every field has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import typing
from dataclasses import dataclass, field

from ..episodes import split_sizes
from ..metalearn import Algorithm, MetaConfig
from ..mixup import LambdaScope, MixConfig, MixTarget
from ..models import MlpArchitecture


class ConfigError(ValueError):
    """Invalid configuration; ``where`` names the line and/or field."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass(frozen=True)
class DataSection:
    path: str = ""  # dataset file; empty means generate synthetic data
    num_classes: int = 25
    per_class: int = 60  # 30% of 60 still covers k_shot + n_query = 17
    dim: int = 16
    spread: float = 0.7
    seed: int | None = None  # None: derived from run.seed


@dataclass(frozen=True)
class TaskSection:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    fraction: float = 1.0


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class MetaSection:
    algorithm: str = "maml"
    inner_lr: float = 0.1  # desk-scale MLPs need a larger step than 0.01 to adapt in 1-5 steps
    outer_lr: float = 0.001
    inner_steps_train: int = 1
    inner_steps_eval: int = 5
    meta_batch: int = 4
    mtl_meta_mix: bool = True
    pretrain_steps: int = 1000
    pretrain_batch: int = 64
    pretrain_lr: float = 0.001


@dataclass(frozen=True)
class MixupSection:
    enabled: bool = False
    alpha_check: float = 1.0
    mix_target: str = "query"
    lambda_scope: str = "per_episode"


@dataclass(frozen=True)
class RunSection:
    iterations: int = 2000
    eval_every: int = 200
    val_episodes: int = 200
    test_episodes: int = 600
    seed: int = 0
    output_dir: str = "runs/default"
    record_wallclock: bool = False


# Fields that only say where/how to write results; excluded from the fingerprint.
NON_SEMANTIC = {("run", "output_dir"), ("run", "record_wallclock")}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    meta: MetaSection = field(default_factory=MetaSection)
    mixup: MixupSection = field(default_factory=MixupSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        if not self.mixup.enabled and self.mixup != MixupSection():
            # Mixing parameters are inert when mixing is off; canonicalize so that
            # every disabled configuration resolves (and fingerprints) identically.
            object.__setattr__(self, "mixup", MixupSection())
        validate(self)

    # -- derived objects ---------------------------------------------------

    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(self.data.dim, self.model.hidden_dims, self.task.n_way)

    def mix_config(self) -> MixConfig | None:
        if not self.mixup.enabled:
            return None
        return MixConfig(self.mixup.alpha_check, MixTarget(self.mixup.mix_target), LambdaScope(self.mixup.lambda_scope))

    def meta_config(self) -> MetaConfig:
        m = self.meta
        return MetaConfig(
            algorithm=Algorithm(m.algorithm),
            inner_lr=m.inner_lr,
            outer_lr=m.outer_lr,
            inner_steps_train=m.inner_steps_train,
            inner_steps_eval=m.inner_steps_eval,
            meta_batch=m.meta_batch,
            metamix=self.mix_config(),
            mtl_meta_mix=m.mtl_meta_mix,
            pretrain_steps=m.pretrain_steps,
            pretrain_batch=m.pretrain_batch,
            pretrain_lr=m.pretrain_lr,
        )

    def replace(self, **changes: typing.Any) -> ExperimentConfig:
        """``cfg.replace(**{"meta.inner_lr": 0.1, "mixup.enabled": True})``."""
        sections: dict[str, dict] = {}
        for dotted, value in changes.items():
            sec, key = _split_key(dotted)
            sections.setdefault(sec, {})[key] = value
        new = {sec: dataclasses.replace(getattr(self, sec), **kv) for sec, kv in sections.items()}
        return dataclasses.replace(self, **new)

    def fingerprint(self) -> str:
        return hashlib.sha256(format_config(self, semantic_only=True).encode()).hexdigest()[:16]


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _split_key(dotted: str) -> tuple[str, str]:
    sec, _, key = dotted.partition(".")
    if sec not in SECTIONS or key not in _field_types(sec):
        raise ConfigError(f"unknown key {dotted!r}")
    return sec, key


def _field_types(section: str) -> dict[str, str]:
    cls = SECTIONS[section]
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def field_names() -> list[str]:
    return [f"{sec}.{key}" for sec in SECTIONS for key in _field_types(sec)]


# -- value coercion -----------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def coerce(type_name: str, text: str):
    text = text.strip()
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name == "bool":
        return _parse_bool(text)
    if type_name == "str":
        return text
    if type_name == "int | None":
        return None if text in ("", "none", "None") else int(text)
    if type_name == "tuple[int, ...]":
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    raise TypeError(f"no coercion for {type_name}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# -- validation ---------------------------------------------------------------


def validate(cfg: ExperimentConfig) -> None:
    def require(ok: bool, key: str, message: str):
        if not ok:
            raise ConfigError(message, key)

    d, t, r = cfg.data, cfg.task, cfg.run
    require(d.num_classes >= 3, "data.num_classes", "must be >= 3")
    require(d.per_class >= 1, "data.per_class", "must be >= 1")
    require(d.dim >= 1, "data.dim", "must be >= 1")
    require(d.spread >= 0, "data.spread", "must be >= 0")
    require(t.n_way >= 2, "task.n_way", "must be >= 2")
    require(t.k_shot >= 1, "task.k_shot", "must be >= 1")
    require(t.n_query >= 1, "task.n_query", "must be >= 1")
    require(0 < t.fraction <= 1, "task.fraction", "must lie in (0, 1]")
    if not d.path:
        need = t.k_shot + t.n_query
        kept = max(1, math.ceil(round(t.fraction * d.per_class, 9)))
        require(d.per_class >= need, "data.per_class", f"must be >= k_shot + n_query = {need}")
        require(kept >= need, "task.fraction", f"keeps {kept} examples per training class, fewer than k_shot + n_query = {need}")
        n_train, _, n_test = split_sizes(d.num_classes)
        require(t.n_way <= min(n_train, n_test), "task.n_way", f"exceeds the {min(n_train, n_test)} classes of the smallest train/test split")
    require(all(h >= 1 for h in cfg.model.hidden_dims), "model.hidden_dims", "widths must be >= 1")
    require(cfg.meta.algorithm in {a.value for a in Algorithm}, "meta.algorithm", f"must be one of {[a.value for a in Algorithm]}")
    require(cfg.meta.inner_lr >= 0, "meta.inner_lr", "must be >= 0")
    require(cfg.meta.outer_lr > 0, "meta.outer_lr", "must be > 0")
    require(cfg.meta.inner_steps_train >= 1, "meta.inner_steps_train", "must be >= 1")
    require(cfg.meta.inner_steps_eval >= 1, "meta.inner_steps_eval", "must be >= 1")
    require(cfg.meta.meta_batch >= 1, "meta.meta_batch", "must be >= 1")
    require(cfg.meta.pretrain_steps >= 0, "meta.pretrain_steps", "must be >= 0")
    require(cfg.meta.pretrain_batch >= 1, "meta.pretrain_batch", "must be >= 1")
    require(cfg.meta.pretrain_lr > 0, "meta.pretrain_lr", "must be > 0")
    require(cfg.mixup.alpha_check > 0, "mixup.alpha_check", "must be > 0")
    require(cfg.mixup.mix_target in {m.value for m in MixTarget}, "mixup.mix_target", f"must be one of {[m.value for m in MixTarget]}")
    require(
        cfg.mixup.lambda_scope in {s.value for s in LambdaScope},
        "mixup.lambda_scope",
        f"must be one of {[s.value for s in LambdaScope]}",
    )
    require(r.iterations >= 0, "run.iterations", "must be >= 0")
    require(r.eval_every >= 1, "run.eval_every", "must be >= 1")
    require(r.val_episodes >= 1, "run.val_episodes", "must be >= 1")
    require(r.test_episodes >= 1, "run.test_episodes", "must be >= 1")


# -- text form ----------------------------------------------------------------


def parse_config(text: str, source: str = "<config>", overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse config text; unknown sections/keys and bad values raise :class:`ConfigError`."""
    values: dict[str, dict[str, typing.Any]] = {sec: {} for sec in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", where)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", where)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", where)
        if section is None:
            raise ConfigError("key outside of any [section]", where)
        key, _, value = (s.strip() for s in line.partition("="))
        types = _field_types(section)
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]", where)
        try:
            values[section][key] = coerce(types[key], value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), f"{where} ({section}.{key})") from None
    for dotted, value in (overrides or {}).items():
        sec, key = _split_key(dotted)
        try:
            values[sec][key] = coerce(_field_types(sec)[key], str(value))
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), f"override {dotted}") from None
    return ExperimentConfig(**{sec: SECTIONS[sec](**kv) for sec, kv in values.items()})


def load_config(path: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from None
    return parse_config(text, str(path), overrides)


def format_config(cfg: ExperimentConfig, semantic_only: bool = False) -> str:
    """Resolved text with every field spelled out."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(SECTIONS[sec]):
            if semantic_only and (sec, f.name) in NON_SEMANTIC:
                continue
            lines.append(f"{f.name} = {_format_value(getattr(getattr(cfg, sec), f.name))}")
        lines.append("")
    return "\n".join(lines)
