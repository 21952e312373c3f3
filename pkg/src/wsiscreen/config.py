"""Pipeline configuration loaded from YAML. Unknown keys are rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .contrastive import AugmentConfig, ContrastiveConfig
from .errors import ConfigError
from .mil import HEAD_KINDS, MilConfig
from .mp_filter import STRATEGIES, MPConfig


@dataclass(frozen=True)
class FilterConfig:
    strategy: str = "mp_topk"
    k: int = 50
    source_fraction: float = 0.8


@dataclass(frozen=True)
class EvalConfig:
    s_min: tuple = (0.90, 0.95)
    threshold: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str
    work_dir: str
    seed: int = 0
    mp: MPConfig = field(default_factory=MPConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self, check_paths=True) -> None:
        if check_paths and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.filter.strategy not in STRATEGIES:
            raise ConfigError(f"filter.strategy must be one of {STRATEGIES}")
        if self.filter.k < 1:
            raise ConfigError("filter.k must be >= 1")
        if not 0 < self.filter.source_fraction <= 1:
            raise ConfigError("filter.source_fraction must be in (0, 1]")
        if self.mil.head not in HEAD_KINDS:
            raise ConfigError(f"mil.head must be one of {HEAD_KINDS}")
        if any(not 0 <= s <= 1 for s in self.eval.s_min):
            raise ConfigError("eval.s_min values must lie in [0, 1]")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contrastive"].pop("seed")
        d["mp"].pop("seed")
        d["mil"].pop("seed")
        d["eval"]["s_min"] = list(self.eval.s_min)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build(cls, data, where, skip=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict, base_dir: Optional[Path] = None) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    top = {"paths", "seed", "mp", "filter", "contrastive", "mil", "eval"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(top)}")
    paths = d.get("paths") or {}
    if set(paths) - {"manifest", "work_dir"}:
        raise ConfigError(f"paths: unknown key(s) {sorted(set(paths) - {'manifest', 'work_dir'})}")
    if "manifest" not in paths or "work_dir" not in paths:
        raise ConfigError("paths.manifest and paths.work_dir are required")
    base = Path(base_dir) if base_dir is not None else Path(".")

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    seed = d.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    con = dict(d.get("contrastive") or {})
    aug = _build(AugmentConfig, con.pop("augment", None), "contrastive.augment")
    evd = dict(d.get("eval") or {})
    if "s_min" in evd:
        evd["s_min"] = tuple(float(s) for s in evd["s_min"])
    return PipelineConfig(
        manifest=resolve(paths["manifest"]),
        work_dir=resolve(paths["work_dir"]),
        seed=seed,
        mp=_build(MPConfig, d.get("mp"), "mp", skip=("seed",)),
        filter=_build(FilterConfig, d.get("filter"), "filter"),
        contrastive=replace(_build(ContrastiveConfig, con, "contrastive", skip=("seed", "augment")), augment=aug),
        mil=_build(MilConfig, d.get("mil"), "mil", skip=("seed",)),
        eval=_build(EvalConfig, evd, "eval"),
    )


def load_yaml(path):
    """Parse a YAML file, turning syntax errors into ConfigError with a line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: parse error: {problem}") from exc


def load_config(path, check_paths=True) -> PipelineConfig:
    path = Path(path)
    cfg = config_from_dict(load_yaml(path), base_dir=path.parent)
    cfg.validate(check_paths=check_paths)
    return cfg
