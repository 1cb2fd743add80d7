"""Experiment configuration: parsing, validation and the stable config hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

KINDS = ("theorem1-bounds", "corollary1-strip", "corollary2-annealed", "de-giorgi",
         "corrector-suite", "identity-regression")
FIELD_KINDS = ("identity", "elasticity", "de-giorgi", "two-phase")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


DEFAULTS: dict = {
    "identity-regression": {
        "domain": {"d": 2, "extents": [5, 5], "shape": "box"},
        "field": {"kind": "identity"},
    },
    "theorem1-bounds": {
        "domain": {"d": 3, "extents": [65, 65, 65], "shape": "box"},
        "field": {"kind": "identity"},
        "estimates": {"sources": 8, "alpha": 1.5, "p": 2.0, "q": 1.2,
                      "radii_A2": [1, 2, 4], "radii_B": [4, 8, 16], "radii_C": [4, 8, 16],
                      "radii_D": [4, 8, 16], "radii_A": [2, 4, 8]},
        "bands": {"A2": 0.5, "B": 0.5, "C": 0.7, "D": 0.7, "A": 4.0},
    },
    "corollary1-strip": {
        "domain": {"d": 2, "extents": [9, 129], "shape": "strip", "bounded_axis": 0},
        "field": {"kind": "identity"},
        "estimates": {"distances": [4, 8, 12, 16, 20, 24, 28, 32], "oracle_band": 0.15, "min_r2": 0.95},
    },
    "corollary2-annealed": {
        "domain": {"d": 3, "extents": [65, 65, 65], "shape": "box"},
        "ensemble": {"kind": "iid-two-phase", "low": 0.25, "high": 1.0, "p": 0.5, "seed": 2024},
        "estimates": {"N": 64, "radii": [2, 4, 8, 16]},
        "bands": {"G": 0.15, "gradG": 0.25, "gradgradG": 0.35},
    },
    "de-giorgi": {
        "domain": {"d": 3, "extents": [65, 65, 65], "shape": "box"},
        "coarse_domain": {"d": 3, "extents": [33, 33, 33], "shape": "box"},
        "field": {"kind": "de-giorgi"},
        "estimates": {"shells": [1, 2, 4, 8], "band": 0.02, "shell_in": 8, "shell_out": 16},
    },
    "corrector-suite": {
        "corrector": {"L": 2, "d": 2, "low": 0.25, "high": 1.0, "p": 0.5, "T": 1e4, "k_max": 200,
                      "probes": 32, "T_sweep": [1e2, 1e3, 1e4]},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """Read a TOML (key = value, dotted sections) or JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix == ".json" or text.lstrip().startswith("{"):
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("config", f"parse error: {exc}") from exc


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


def _need(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def _radii(vals, key):
    _need(isinstance(vals, list) and len(vals) >= 1, key, "must be a non-empty list")
    _need(all(isinstance(v, (int, float)) and v > 0 for v in vals), key, "radii must be positive numbers")
    _need(list(vals) == sorted(vals), key, "radii must be ascending")


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def kind(self) -> str:
        return self.raw["kind"]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})


def validate(raw: dict, seed: int | None = None) -> ExperimentConfig:
    """Fill defaults for the experiment kind and check every field."""
    _need(isinstance(raw, dict), "config", "top level must be a table")
    kind = raw.get("kind")
    _need(kind in KINDS, "kind", f"must be one of {', '.join(KINDS)}; got {kind!r}")
    cfg = _merge(DEFAULTS[kind], raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    s = cfg.setdefault("seed", 0)
    _need(isinstance(s, int) and 0 <= s < 2**64, "seed", "must be an unsigned 64-bit integer")

    solver = cfg.setdefault("solver", {})
    tol = solver.setdefault("rel_tol", 1e-10)
    _need(isinstance(tol, (int, float)) and 0 < tol <= 1e-4, "solver.rel_tol", "must lie in (0, 1e-4]")
    _need(solver.setdefault("preconditioner", "diagonal") in ("none", "diagonal"),
          "solver.preconditioner", "must be 'none' or 'diagonal'")
    mi = solver.get("max_iter")
    _need(mi is None or (isinstance(mi, int) and mi >= 1), "solver.max_iter", "must be a positive integer")

    if "domain" in cfg:
        dom = cfg["domain"]
        _need(dom.get("d") in (2, 3), "domain.d", "must be 2 or 3")
        ext = dom.get("extents")
        _need(isinstance(ext, list) and len(ext) == dom["d"] and all(isinstance(n, int) and n >= 3 for n in ext),
              "domain.extents", "must list d integers >= 3")
        _need(dom.get("shape", "box") in ("box", "strip", "torus"), "domain.shape", "unknown shape")
    if "field" in cfg:
        _need(cfg["field"].get("kind") in FIELD_KINDS, "field.kind", f"must be one of {', '.join(FIELD_KINDS)}")
        if cfg["field"]["kind"] == "two-phase":
            fe = cfg["field"]
            for k in ("low", "high"):
                _need(isinstance(fe.get(k), (int, float)) and 0 < fe[k] <= 1, f"field.{k}", "must lie in (0, 1]")
            _need(0 <= fe.get("p", 0.5) <= 1, "field.p", "must lie in [0, 1]")
    est = cfg.get("estimates", {})
    for k, v in est.items():
        if k.startswith("radii"):
            _radii(v, f"estimates.{k}")
    if kind == "theorem1-bounds":
        _need(1 <= est["sources"] <= 16, "estimates.sources", "must lie in [1, 16]")
    if kind == "corollary2-annealed":
        n = est.get("N")
        _need(isinstance(n, int) and n >= 2, "estimates.N", "must be an integer >= 2")
        ens = cfg["ensemble"]
        _need(ens.get("kind") in ("iid-two-phase", "checkerboard-random"), "ensemble.kind", "unknown ensemble")
        _need(0 <= ens.get("p", -1) <= 1, "ensemble.p", "must lie in [0, 1]")
    if kind == "corollary1-strip":
        _need(cfg["domain"].get("shape") == "strip", "domain.shape", "corollary1-strip runs on a strip")
        _need(len(est["distances"]) >= 3, "estimates.distances", "need at least 3 distances")
    if kind == "corrector-suite":
        c = cfg["corrector"]
        _need(isinstance(c.get("L"), int) and c["L"] >= 1, "corrector.L", "must be a positive integer")
        _need(c.get("T", 1) > 0, "corrector.T", "must be positive")
    out = cfg.setdefault("output", {})
    _need(isinstance(out, dict), "output", "must be a table")
    return ExperimentConfig(cfg)
