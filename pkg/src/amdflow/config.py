"""Run configuration: TOML loading, validation and work-dir snapshots."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .calculator import RESOURCE_CLASSES
from .similarity import DEFAULT_THRESHOLD, FingerprintParams
from .screening import PredictorConfig
from .structure import is_element
from .substitution import DEFAULT_MAX_CANDIDATES

SNAPSHOT_NAME = "config.snapshot.json"
DEFAULT_E_CUT = 0.05


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one ``field: message`` string per problem."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class PoolConfig:
    name: str
    resource_class: str = "cpu"
    size: int = 1


@dataclass
class PredictorSettings:
    kind: str = "builtin-surrogate"
    command: list[str] | None = None
    batch_size: int = 64
    threshold_ef: float | None = 0.0
    top_k: int | None = None
    timeout: float = 3600.0
    resource_class: str = "accelerator"
    keep_elemental: bool = True

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(self.kind, tuple(self.command) if self.command else None,
                               self.batch_size, self.threshold_ef, self.top_k, self.timeout)


@dataclass
class CalculatorSettings:
    kind: str = "mock"
    command: list[str] | None = None
    time_limit: float = 3600.0
    resource_class: str = "cpu"
    mock_delay: float = 0.0


@dataclass
class RunConfig:
    system: list[str]
    templates_dir: str
    work_dir: str
    predictor: PredictorSettings = field(default_factory=PredictorSettings)
    calculator: CalculatorSettings = field(default_factory=CalculatorSettings)
    fingerprint: FingerprintParams = field(default_factory=FingerprintParams)
    dedup_threshold: float = DEFAULT_THRESHOLD
    e_cut_promote: float = DEFAULT_E_CUT
    pools: list[PoolConfig] = field(default_factory=list)
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    allow_fewer: bool = True
    references: str | None = None
    max_attempts: int = 2

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def default_pools() -> list[PoolConfig]:
    return [PoolConfig("cpu", "cpu", max(1, os.cpu_count() or 1)), PoolConfig("gpu", "accelerator", 1)]


def _section(data: dict, name: str, errors: list[str]) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        errors.append(f"{name}: must be a table")
        return {}
    return sec


def _known(sec: dict, allowed: set[str], prefix: str, errors: list[str]) -> None:
    for key in sorted(set(sec) - allowed):
        errors.append(f"{prefix}{key}: unknown setting")


def _command(value, name: str, errors: list[str]) -> list[str] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return value.split()
    if isinstance(value, list) and all(isinstance(v, str) for v in value) and value:
        return list(value)
    errors.append(f"{name}: must be a string or a non-empty list of strings")
    return None


def _number(sec: dict, key: str, default, prefix: str, errors: list[str], kind=float):
    value = sec.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and not isinstance(value, int)):
        errors.append(f"{prefix}{key}: expected {'an integer' if kind is int else 'a number'}, got {value!r}")
        return default
    return kind(value)


def from_dict(data: dict, base_dir: Path) -> RunConfig:
    """Build and validate a RunConfig; relative paths are resolved against ``base_dir``."""
    errors: list[str] = []
    _known(data, {"system", "templates_dir", "work_dir", "predictor", "calculator", "fingerprint",
                  "dedup_threshold", "e_cut_promote", "pools", "max_candidates", "allow_fewer",
                  "references", "max_attempts"}, "", errors)

    system = data.get("system")
    if not isinstance(system, list) or not all(isinstance(e, str) for e in system):
        errors.append("system: must be a list of element symbols")
        system = []
    else:
        bad = [e for e in system if not is_element(e)]
        if bad:
            errors.append(f"system: unknown element symbol(s) {bad}")
        if len(set(system)) != len(system):
            errors.append("system: elements must be distinct")
        if not 2 <= len(system) <= 6:
            errors.append(f"system: needs 2 to 6 elements, got {len(system)}")

    def path_field(key: str, required: bool = True, must_exist: bool = True, is_dir: bool = True):
        value = data.get(key)
        if value is None:
            if required:
                errors.append(f"{key}: required")
            return None
        if not isinstance(value, str):
            errors.append(f"{key}: must be a path string")
            return None
        p = (base_dir / value).resolve()
        if must_exist and not (p.is_dir() if is_dir else p.is_file()):
            errors.append(f"{key}: {'directory' if is_dir else 'file'} not found: {p}")
        return str(p)

    templates_dir = path_field("templates_dir")
    work_dir = path_field("work_dir", must_exist=False)
    if work_dir is not None and Path(work_dir).exists() and not Path(work_dir).is_dir():
        errors.append(f"work_dir: exists and is not a directory: {work_dir}")
    references = path_field("references", required=False, is_dir=False)

    ps = _section(data, "predictor", errors)
    _known(ps, set(PredictorSettings.__dataclass_fields__), "predictor.", errors)
    predictor = PredictorSettings(
        kind=ps.get("kind", "builtin-surrogate"),
        command=_command(ps.get("command"), "predictor.command", errors),
        batch_size=_number(ps, "batch_size", 64, "predictor.", errors, int),
        threshold_ef=_number(ps, "threshold_ef", 0.0, "predictor.", errors),
        top_k=_number(ps, "top_k", None, "predictor.", errors, int),
        timeout=_number(ps, "timeout", 3600.0, "predictor.", errors),
        resource_class=ps.get("resource_class", "accelerator"),
        keep_elemental=bool(ps.get("keep_elemental", True)),
    )
    try:
        predictor.predictor_config()
    except ValueError as exc:
        errors.append(f"predictor: {exc}")
    if predictor.resource_class not in RESOURCE_CLASSES:
        errors.append(f"predictor.resource_class: must be one of {list(RESOURCE_CLASSES)}")

    cs = _section(data, "calculator", errors)
    _known(cs, set(CalculatorSettings.__dataclass_fields__), "calculator.", errors)
    calculator = CalculatorSettings(
        kind=cs.get("kind", "mock"),
        command=_command(cs.get("command"), "calculator.command", errors),
        time_limit=_number(cs, "time_limit", 3600.0, "calculator.", errors),
        resource_class=cs.get("resource_class", "cpu"),
        mock_delay=_number(cs, "mock_delay", 0.0, "calculator.", errors),
    )
    if calculator.kind not in ("mock", "external-command"):
        errors.append(f"calculator.kind: must be 'mock' or 'external-command', got {calculator.kind!r}")
    if calculator.kind == "external-command" and not calculator.command:
        errors.append("calculator.command: required for external-command")
    if not calculator.time_limit > 0:
        errors.append("calculator.time_limit: must be positive")
    if calculator.mock_delay < 0:
        errors.append("calculator.mock_delay: must be >= 0")
    if calculator.resource_class not in RESOURCE_CLASSES:
        errors.append(f"calculator.resource_class: must be one of {list(RESOURCE_CLASSES)}")

    fs = _section(data, "fingerprint", errors)
    _known(fs, {"cutoff", "bin_width", "smearing_sigma"}, "fingerprint.", errors)
    try:
        fingerprint = FingerprintParams(
            _number(fs, "cutoff", 10.0, "fingerprint.", errors),
            _number(fs, "bin_width", 0.1, "fingerprint.", errors),
            _number(fs, "smearing_sigma", 0.05, "fingerprint.", errors),
        )
    except ValueError as exc:
        errors.append(f"fingerprint: {exc}")
        fingerprint = FingerprintParams()

    dedup_threshold = _number(data, "dedup_threshold", DEFAULT_THRESHOLD, "", errors)
    if not 0.0 < dedup_threshold <= 1.0:
        errors.append("dedup_threshold: must be in (0, 1]")
    e_cut = _number(data, "e_cut_promote", DEFAULT_E_CUT, "", errors)
    max_candidates = _number(data, "max_candidates", DEFAULT_MAX_CANDIDATES, "", errors, int)
    if max_candidates < 1:
        errors.append("max_candidates: must be positive")
    max_attempts = _number(data, "max_attempts", 2, "", errors, int)
    if max_attempts < 1:
        errors.append("max_attempts: must be >= 1")

    pools_raw = data.get("pools")
    pools: list[PoolConfig] = []
    if pools_raw is None:
        pools = default_pools()
    elif not isinstance(pools_raw, list):
        errors.append("pools: must be an array of tables")
    else:
        for i, p in enumerate(pools_raw):
            if not isinstance(p, dict) or "name" not in p:
                errors.append(f"pools[{i}]: needs at least a name")
                continue
            cls = p.get("class", p.get("resource_class", "cpu"))
            size = p.get("size", 1)
            if cls not in RESOURCE_CLASSES:
                errors.append(f"pools[{i}].class: must be one of {list(RESOURCE_CLASSES)}")
            if not isinstance(size, int) or isinstance(size, bool) or size < 0:
                errors.append(f"pools[{i}].size: must be an integer >= 0")
                size = 0
            pools.append(PoolConfig(str(p["name"]), cls, size))
        names = [p.name for p in pools]
        if len(set(names)) != len(names):
            errors.append("pools: names must be unique")
    for needed in {predictor.resource_class, calculator.resource_class}:
        if pools and not any(p.resource_class == needed for p in pools):
            errors.append(f"pools: no pool of class {needed!r}, which the configured stages use")

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        system=list(system), templates_dir=templates_dir, work_dir=work_dir,
        predictor=predictor, calculator=calculator, fingerprint=fingerprint,
        dedup_threshold=dedup_threshold, e_cut_promote=e_cut, pools=pools,
        max_candidates=max_candidates, allow_fewer=bool(data.get("allow_fewer", True)),
        references=references, max_attempts=max_attempts,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"]) from None
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError([f"config: {exc}"]) from None
    return from_dict(data, path.resolve().parent)


def load_snapshot(work_dir) -> RunConfig:
    """Config saved at run start; all its paths are absolute."""
    path = Path(work_dir) / SNAPSHOT_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"snapshot: not found: {path}"]) from None
    except (OSError, ValueError) as exc:
        raise ConfigError([f"snapshot: {exc}"]) from None
    data["work_dir"] = str(Path(work_dir).resolve())
    data["pools"] = [{"name": p["name"], "class": p["resource_class"], "size": p["size"]}
                     for p in data.get("pools", [])]
    return from_dict(data, path.parent)
