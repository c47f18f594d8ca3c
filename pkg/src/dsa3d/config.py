"""Run configuration: ``key = value`` lines grouped under ``[section]`` headers.

Comments start with ``#`` or ``;``. Unknown sections or keys, malformed
values and missing mandatory keys (``[run] seed`` and ``[run] task``) are
errors that carry the offending line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .volume import get_task


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if path and line else (f"line {line}: " if line else "")
        super().__init__(where + message)


@dataclass(frozen=True)
class RunSection:
    seed: int = None
    task: str = None
    folds: int = 10
    output_dir: str = "runs"
    threads: int = 1
    pretrain_per_fold: bool = False


@dataclass(frozen=True)
class PhantomSection:
    grid: int = 32
    noise: float = 0.0
    target_per_class: int = 50
    source_per_class: int = 10
    center_jitter: float = 1.0
    # per-class means, ordered AD, MCI, NC
    outer_radius: tuple[float, ...] = (11.5, 12.0, 12.5)
    outer_std: float = 0.4
    shell_thickness: tuple[float, ...] = (1.6, 2.4, 3.2)
    shell_std: float = 0.15
    cavity_radius: tuple[float, ...] = (5.5, 4.25, 3.0)
    cavity_std: float = 0.25


@dataclass(frozen=True)
class CaeSection:
    maps: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    pool: int = 2
    activation: str = "relu"
    decoder_activation: str = "linear"
    epochs: int = 5
    batch_size: int = 4


@dataclass(frozen=True)
class NetworkSection:
    maps: tuple[int, ...] = (8, 16, 32)
    kernels: tuple[int, ...] = (3, 3, 3)
    pools: tuple[int, ...] = (2, 2, 2)
    fc: tuple[int, ...] = (128, 64)
    aux_weights: tuple[float, ...] = (0.3, 0.3)
    top_weight: float = 1.0
    freeze_conv: bool = True
    normalize_features: bool = True
    transfer_noise: float = 0.0
    epochs: int = 40
    batch_size: int = 5


@dataclass(frozen=True)
class OptimizerSection:
    method: str = "adadelta"
    rho: float = 0.95
    eps: float = 1e-6
    rate: float = 0.01


@dataclass(frozen=True)
class EmbedSection:
    perplexity: float = 10.0
    iterations: int = 500
    learning_rate: float = 100.0
    exaggeration: float = 4.0
    exaggeration_iters: int = 100


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    cae: CaeSection = field(default_factory=CaeSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    embed: EmbedSection = field(default_factory=EmbedSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def task(self) -> str:
        return self.run.task

    def with_overrides(self, **run_changes) -> "RunConfig":
        changes = {k: v for k, v in run_changes.items() if v is not None}
        if not changes:
            return self
        cfg = dataclasses.replace(self, run=dataclasses.replace(self.run, **changes))
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short hash naming the run directory; task, threads and output_dir are excluded."""
        d = self.to_dict()
        for k in ("task", "threads", "output_dir"):
            d["run"].pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.run.output_dir) / self.digest()


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
MANDATORY = (("run", "seed"), ("run", "task"))

_SECTION_TYPES = {
    "run": RunSection, "phantom": PhantomSection, "cae": CaeSection,
    "network": NetworkSection, "optimizer": OptimizerSection, "embed": EmbedSection,
}


def _convert(raw: str, tp, key: str, line: int, path):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            (inner, _) = typing.get_args(tp)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if not parts:
                raise ValueError
            return tuple(_convert(p, inner, key, line, path) for p in parts)
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if tp is int:
            return int(raw, 10)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        name = getattr(tp, "__name__", str(tp))
        raise ConfigError(f"{key}: expected {name}, got {raw!r}", line, path) from None


def _field_types(section_cls) -> dict:
    hints = typing.get_type_hints(section_cls)
    out = {}
    for f in dataclasses.fields(section_cls):
        tp = hints[f.name]
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if typing.get_origin(tp) is typing.Union and len(args) == 1:
            tp = args[0]
        out[f.name] = tp
    return out


_RUN_TYPES = {"seed": int, "task": str}


def parse_config_text(text: str, path=None) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    lines: dict[tuple, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw
        for marker in ("#", ";"):
            pos = line.find(marker)
            if pos >= 0:
                line = line[:pos]
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, path)
            section = line[1:-1].strip().lower()
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        types = _field_types(_SECTION_TYPES[section])
        if section == "run":
            types.update(_RUN_TYPES)
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        values[section][key] = _convert(value, types[key], key, lineno, path)
        lines[(section, key)] = lineno
    for sec, key in MANDATORY:
        if key not in values[sec]:
            raise ConfigError(f"missing mandatory key [{sec}] {key}", None, path)
    cfg = RunConfig(**{name: cls(**values[name]) for name, cls in _SECTION_TYPES.items()})
    try:
        validate(cfg)
    except ConfigError as exc:
        key = getattr(exc, "key", None)
        if key is not None and key in lines:
            raise ConfigError(str(exc), lines[key], path) from None
        raise
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config_text(text, path)


def default_config_text() -> str:
    return resources.files("dsa3d").joinpath("default.cfg").read_text()


def _fail(section: str, key: str, message: str):
    exc = ConfigError(f"[{section}] {key}: {message}")
    exc.key = (section, key)
    raise exc


def validate(cfg: RunConfig) -> None:
    r, ph, ca, nw, op, em = cfg.run, cfg.phantom, cfg.cae, cfg.network, cfg.optimizer, cfg.embed
    try:
        get_task(r.task)
    except ValueError as exc:
        _fail("run", "task", str(exc))
    if r.folds < 2:
        _fail("run", "folds", "need at least 2 folds")
    if r.threads < 1:
        _fail("run", "threads", "must be >= 1")
    if ph.grid < 4:
        _fail("phantom", "grid", "must be >= 4")
    if ph.noise < 0:
        _fail("phantom", "noise", "must be nonnegative")
    for key in ("outer_radius", "shell_thickness", "cavity_radius"):
        if len(getattr(ph, key)) != 3:
            _fail("phantom", key, "needs three values (AD, MCI, NC)")
    if ph.target_per_class < 1:
        _fail("phantom", "target_per_class", "must be >= 1")
    if ph.source_per_class < 1:
        _fail("phantom", "source_per_class", "must be >= 1")
    for key in ("maps", "kernels", "pools"):
        if len(getattr(nw, key)) != len(ca.maps):
            _fail("network", key, f"needs {len(ca.maps)} entries, one per autoencoder layer")
    if len(nw.aux_weights) != len(nw.fc):
        _fail("network", "aux_weights", f"needs {len(nw.fc)} entries, one per fc layer")
    if any(k % 2 == 0 for k in nw.kernels):
        _fail("network", "kernels", "kernel sizes must be odd")
    if ca.kernel % 2 == 0:
        _fail("cae", "kernel", "kernel size must be odd")
    if op.method not in ("adadelta", "sgd"):
        _fail("optimizer", "method", "choose 'adadelta' or 'sgd'")
    if not 0 < op.rho < 1:
        _fail("optimizer", "rho", "must lie in (0, 1)")
    if em.perplexity < 2:
        _fail("embed", "perplexity", "must be >= 2")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config_text(format_config(c)) == c``."""
    lines = []
    for name in _SECTION_TYPES:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format_value(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)
