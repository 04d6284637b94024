"""Run configuration: JSON file + command-line overrides.

Example document (every key optional; shown with defaults)::

    {
      "schema_version": 1,
      "grid":    {"stages": [2, 4, 6, 8], "vin_kv": [5, 15, 25], "cap_uf": [1, 5, 10],
                  "freq_hz": [50, 100, 500], "rload_mohm": [6, 12, 60]},
      "circuit": {"esr_ohm": 0.5, "diode_vf_v": 0.7, "diode_ron_ohm": 10.0, "diode_goff_s": 1e-9},
      "sim":     {"steps_per_cycle": 5000, "max_cycles": 2000, "settle_rel_tol": 1e-8,
                  "settle_consecutive": 3, "max_diode_iters": 50},
      "forest":  {"n_trees": [100, 300], "max_depth": [null, 8, 16],
                  "min_samples_leaf": [1, 2, 5], "feature_fraction": ["1/3", "sqrt"],
                  "cv_folds": 5},
      "seeds":   {"split": 0, "cv": 0, "forest": 0},
      "feature_mode": "full",
      "include_unconverged": false,
      "workers": null
    }

``"sqrt"`` as a feature fraction means ``sqrt(F) / F`` for ``F`` features;
``null`` depth means unlimited; ``null`` workers means all available CPUs.
The ``CWRIPPLE_CONFIG`` environment variable names a default config file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .circuit import CaseParams, SimConfig
from .dataset import FEATURE_MODES, SweepGrid, default_workers
from .forest import ForestHyperparams

CONFIG_SCHEMA_VERSION = 1
CONFIG_ENV_VAR = "CWRIPPLE_CONFIG"

DEFAULT_SPLIT_SEED = 0
DEFAULT_CV_SEED = 0
DEFAULT_FOREST_SEED = 0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ForestSearch:
    n_trees: tuple[int, ...] = (100, 300)
    max_depth: tuple[int | None, ...] = (None, 8, 16)
    min_samples_leaf: tuple[int, ...] = (1, 2, 5)
    feature_fraction: tuple[str | float, ...] = ("1/3", "sqrt")
    cv_folds: int = 5

    def expand(self, n_features: int, seed: int) -> list[ForestHyperparams]:
        grid = []
        for n_trees in self.n_trees:
            for depth in self.max_depth:
                for leaf in self.min_samples_leaf:
                    for ff in self.feature_fraction:
                        grid.append(ForestHyperparams(int(n_trees), depth, int(leaf),
                                                      parse_fraction(ff, n_features), seed))
        return grid


def parse_fraction(value, n_features: int) -> float:
    if isinstance(value, str):
        text = value.strip().lower()
        if text == "sqrt":
            return math.sqrt(n_features) / n_features
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    return float(value)


@dataclass(frozen=True)
class CircuitDefaults:
    """Non-swept component parameters copied into every case."""

    esr: float = 0.5
    diode_vf: float = 0.7
    diode_ron: float = 10.0
    diode_goff: float = 1e-9

    def __post_init__(self):
        # validate through CaseParams so the rules live in one place
        CaseParams(1, 1.0, 1.0, 1.0, 1.0, self.esr, self.diode_vf, self.diode_ron, self.diode_goff)


@dataclass(frozen=True)
class RunConfig:
    grid: SweepGrid = SweepGrid()
    base: CircuitDefaults = CircuitDefaults()
    sim: SimConfig = SimConfig()
    forest: ForestSearch = ForestSearch()
    split_seed: int = DEFAULT_SPLIT_SEED
    cv_seed: int = DEFAULT_CV_SEED
    forest_seed: int = DEFAULT_FOREST_SEED
    feature_mode: str = "full"
    include_unconverged: bool = False
    workers: int | None = None

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers else default_workers()

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "grid": {k: list(getattr(self.grid, k)) for k in ("stages", "vin_kv", "cap_uf", "freq_hz", "rload_mohm")},
            "circuit": {"esr_ohm": self.base.esr, "diode_vf_v": self.base.diode_vf,
                        "diode_ron_ohm": self.base.diode_ron, "diode_goff_s": self.base.diode_goff},
            "sim": {"steps_per_cycle": self.sim.steps_per_cycle, "max_cycles": self.sim.max_cycles,
                    "settle_rel_tol": self.sim.settle_rel_tol,
                    "settle_consecutive": self.sim.settle_consecutive,
                    "max_diode_iters": self.sim.max_diode_iters},
            "forest": {"n_trees": list(self.forest.n_trees), "max_depth": list(self.forest.max_depth),
                       "min_samples_leaf": list(self.forest.min_samples_leaf),
                       "feature_fraction": list(self.forest.feature_fraction),
                       "cv_folds": self.forest.cv_folds},
            "seeds": {"split": self.split_seed, "cv": self.cv_seed, "forest": self.forest_seed},
            "feature_mode": self.feature_mode,
            "include_unconverged": self.include_unconverged,
            "workers": self.workers,
        }


_SECTIONS = {
    "grid": {"stages", "vin_kv", "cap_uf", "freq_hz", "rload_mohm"},
    "circuit": {"esr_ohm", "diode_vf_v", "diode_ron_ohm", "diode_goff_s"},
    "sim": {"steps_per_cycle", "max_cycles", "settle_rel_tol", "settle_consecutive", "max_diode_iters"},
    "forest": {"n_trees", "max_depth", "min_samples_leaf", "feature_fraction", "cv_folds"},
    "seeds": {"split", "cv", "forest"},
}
_TOP = {"schema_version", "feature_mode", "include_unconverged", "workers"} | set(_SECTIONS)


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    for section, allowed in _SECTIONS.items():
        extra = set(doc.get(section, {})) - allowed
        if extra:
            raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")
    try:
        return apply_overrides(cfg, {
            **{k: v for k, v in doc.get("grid", {}).items()},
            **{k: v for k, v in doc.get("circuit", {}).items()},
            **{k: v for k, v in doc.get("sim", {}).items()},
            **{f"forest_{k}": v for k, v in doc.get("forest", {}).items()},
            **{f"{k}_seed": v for k, v in doc.get("seeds", {}).items()},
            **{k: doc[k] for k in ("feature_mode", "include_unconverged", "workers") if k in doc},
        })
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Return ``cfg`` with every non-``None`` entry of the flat ``values`` applied."""
    v = {k: val for k, val in values.items() if val is not None}
    grid_keys = {"stages", "vin_kv", "cap_uf", "freq_hz", "rload_mohm"}
    if grid_keys & set(v):
        cfg = replace(cfg, grid=SweepGrid(**{
            k: tuple(v.get(k, getattr(cfg.grid, k))) for k in grid_keys}))
    circuit = {"esr_ohm": "esr", "diode_vf_v": "diode_vf", "diode_ron_ohm": "diode_ron",
               "diode_goff_s": "diode_goff"}
    if set(circuit) & set(v):
        cfg = replace(cfg, base=replace(cfg.base, **{circuit[k]: float(v[k]) for k in circuit if k in v}))
    sim_keys = {"steps_per_cycle", "max_cycles", "settle_rel_tol", "settle_consecutive", "max_diode_iters"}
    if sim_keys & set(v):
        cfg = replace(cfg, sim=replace(cfg.sim, **{k: v[k] for k in sim_keys if k in v}))
    forest = {k[len("forest_"):]: val for k, val in v.items() if k.startswith("forest_")}
    if forest:
        forest = {k: (tuple(val) if isinstance(val, (list, tuple)) else val) for k, val in forest.items()}
        cfg = replace(cfg, forest=replace(cfg.forest, **forest))
    for seed_key in ("split_seed", "cv_seed", "forest_seed"):
        if seed_key in v:
            cfg = replace(cfg, **{seed_key: int(v[seed_key])})
    if "feature_mode" in v:
        if v["feature_mode"] not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
        cfg = replace(cfg, feature_mode=v["feature_mode"])
    if "include_unconverged" in v:
        cfg = replace(cfg, include_unconverged=bool(v["include_unconverged"]))
    if "workers" in v:
        if int(v["workers"]) < 1:
            raise ConfigError("workers must be >= 1")
        cfg = replace(cfg, workers=int(v["workers"]))
    return cfg


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read ``path``, else the file named by ``$CWRIPPLE_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return from_dict(doc)
