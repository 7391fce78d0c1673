"""Experiment configuration: JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .control_variates import BASIS_NAMES
from .errors import ConfigTypeError, ParseError, UnknownKey
from .estimators import BASIC_ESTIMATORS, EstimatorId

_GAUSSIAN = re.compile(r"^gaussian\(\s*([0-9.eE+-]+)\s*\)$")
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class ExperimentConfig:
    mdp_path: str
    theta_init: str = "zeros"
    estimators: tuple = tuple(e.value for e in BASIC_ESTIMATORS)
    n_samples: int = 100_000
    n_pilot: int = 100_000
    master_seed: int = 0
    basis_spec: tuple = ("const", "value", "advantage")
    horizon: int | None = None  # truncates the MDP's horizon when set
    exact: bool = False  # require enumeration (error when over budget)
    margin: float = 0.02
    z_threshold: float = 4.0
    base_dir: str | None = field(default=None, compare=False)

    @property
    def estimator_ids(self) -> list[EstimatorId]:
        return [EstimatorId.parse(e) for e in self.estimators]

    @property
    def theta_scale(self) -> float:
        """0 for ``zeros``, otherwise the standard deviation of ``gaussian(scale)``."""
        if self.theta_init == "zeros":
            return 0.0
        return float(_GAUSSIAN.match(self.theta_init).group(1))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        out["estimators"] = list(self.estimators)
        out["basis_spec"] = list(self.basis_spec)
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return build_config({**self.to_dict(), **changes}, base_dir=self.base_dir)


FIELDS = tuple(f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "base_dir")
_LIST_FIELDS = ("estimators", "basis_spec")


def _int(name: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigTypeError(f"field {name!r} must be an integer, got {value!r}")
    return value


def _validate(raw: Mapping[str, Any]) -> dict:
    unknown = sorted(set(raw) - set(FIELDS))
    if unknown:
        raise UnknownKey(f"unknown configuration key(s): {', '.join(unknown)}")
    if "mdp_path" not in raw:
        raise ConfigTypeError("missing required field 'mdp_path'")
    out = dict(raw)
    if not isinstance(out["mdp_path"], str) or not out["mdp_path"]:
        raise ConfigTypeError(f"field 'mdp_path' must be a non-empty string, got {out['mdp_path']!r}")

    if "theta_init" in out:
        ti = out["theta_init"]
        if not isinstance(ti, str) or not (ti == "zeros" or _GAUSSIAN.match(ti)):
            raise ConfigTypeError(f"field 'theta_init' must be 'zeros' or 'gaussian(<scale>)', got {ti!r}")
        if ti != "zeros" and float(_GAUSSIAN.match(ti).group(1)) < 0:
            raise ConfigTypeError("gaussian theta scale must be non-negative")

    for name in _LIST_FIELDS:
        if name in out:
            v = out[name]
            if isinstance(v, str):
                v = [x for x in (p.strip() for p in v.split(",")) if x]
            if not isinstance(v, (list, tuple)) or not all(isinstance(x, str) for x in v):
                raise ConfigTypeError(f"field {name!r} must be a list of strings, got {v!r}")
            out[name] = tuple(v)
    if "estimators" in out:
        try:
            ids = [EstimatorId.parse(e) for e in out["estimators"]]
        except ValueError as exc:
            raise ConfigTypeError(f"field 'estimators': {exc}") from None
        if not ids:
            raise ConfigTypeError("field 'estimators' must be non-empty")
        if len(set(ids)) != len(ids):
            raise ConfigTypeError("field 'estimators' lists an estimator twice")
        out["estimators"] = tuple(e.value for e in ids)
    if "basis_spec" in out:
        bad = [b for b in out["basis_spec"] if b not in BASIS_NAMES]
        if bad or not out["basis_spec"] or len(set(out["basis_spec"])) != len(out["basis_spec"]):
            raise ConfigTypeError(
                f"field 'basis_spec' must be a non-empty list of distinct names from {list(BASIS_NAMES)}"
            )

    for name in ("n_samples", "n_pilot", "master_seed"):
        if name in out:
            _int(name, out[name])
    if out.get("n_samples", 100) < 100:
        raise ConfigTypeError("field 'n_samples' must be >= 100")
    if out.get("n_pilot", 1) < 1:
        raise ConfigTypeError("field 'n_pilot' must be positive")
    if "master_seed" in out and not 0 <= out["master_seed"] <= _U64:
        raise ConfigTypeError("field 'master_seed' must be an unsigned 64-bit integer")
    if out.get("horizon") is not None and _int("horizon", out["horizon"]) < 1:
        raise ConfigTypeError("field 'horizon' must be >= 1")
    if "exact" in out and not isinstance(out["exact"], bool):
        raise ConfigTypeError(f"field 'exact' must be a boolean, got {out['exact']!r}")
    for name in ("margin", "z_threshold"):
        if name in out:
            v = out[name]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise ConfigTypeError(f"field {name!r} must be a non-negative number, got {v!r}")
            out[name] = float(v)
    return out


def build_config(raw: Mapping[str, Any], base_dir: str | Path | None = None) -> ExperimentConfig:
    return ExperimentConfig(**_validate(raw), base_dir=None if base_dir is None else str(base_dir))


def parse_override(item: str) -> tuple[str, Any]:
    """Split ``key=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ParseError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def resolve_config_path(path: str | Path) -> Path:
    """A path on disk, or the name of a bundled config (``chain5_experiment``)."""
    p = Path(path)
    if p.is_file():
        return p
    if len(p.parts) == 1:
        name = p.name if p.suffix == ".json" else p.name + ".json"
        bundled = resources.files("cvgradlab") / "data" / name
        if bundled.is_file():
            return Path(str(bundled))
    raise FileNotFoundError(f"config file not found: {path}")


def parse_config(path: str | Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a JSON config and apply ``key=value`` overrides last."""
    p = resolve_config_path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("config file must hold a single object")
    for item in overrides:
        key, value = parse_override(item)
        if key not in FIELDS:
            raise UnknownKey(f"unknown configuration key: {key}")
        raw[key] = value
    return build_config(raw, base_dir=p.parent)
