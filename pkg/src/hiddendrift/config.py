"""Scenario files: YAML or JSON, validated against the bundled JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .market import MarketSpec
from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior
from .strategies import LogUtility, PowerUtility

DEFAULTS = {
    "seed": 0,
    "utility": {"kind": "log", "delta": 0.0, "order": 2},
    "filter": "auto",
    "strategy": {"kind": "optimal", "scale": 1.0, "floor": None},
    "grid": {"dt": 2.0 ** -10, "n_paths": 10000, "chunk_size": 5000},
    "pde": {"embedding": "finite_paths", "log_coordinates": True, "n_points": 401, "n_steps": 256,
            "store_every": 4, "n_sd": 6.0, "fk_paths": 20000, "replication_paths": 2000},
    "verify": [],
    "converge": {"kind": "log_replication", "levels": [2.0 ** -6, 2.0 ** -8, 2.0 ** -10]},
    "outputs": ["report"],
}


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


def load_schema() -> dict:
    text = resources.files("hiddendrift").joinpath("schema/scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(raw: dict) -> dict:
    """Validate against the schema and fill in defaults."""
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, raw)
    cfg["market"] = _merge({"volatility": 0.2, "rate": 0.0, "initial_wealth": 1.0, "ellipticity": 1e-10},
                           cfg["market"])
    return cfg


def load_config(path) -> dict:
    """Read a ``.yaml``/``.yml`` or ``.json`` scenario file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    raw = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _vec(x, n):
    return np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()


def build_prior(cfg: dict, n: int):
    p = cfg["prior"]
    kind = p["kind"]
    if kind == "discrete":
        return DiscretePrior(atoms=[_vec(a, n) for a in p["atoms"]], probs=np.asarray(p["probs"], float))
    if kind == "gaussian":
        return GaussianPrior(mean=_vec(p["mean"], n), cov=p["cov"])
    if kind == "ou":
        return OUPrior(alpha=p.get("alpha", 0.0), beta=p.get("beta", 0.0), b=p.get("b", 0.0),
                       delta=p.get("delta", 0.0), mean0=_vec(p["mean0"], n), cov0=p["cov0"])
    return MarkovChainPrior(values=np.asarray(p["values"], float), generator=np.asarray(p["generator"], float),
                            initial_probs=np.asarray(p["initial_probs"], float))


def build_market(cfg: dict) -> MarketSpec:
    m = cfg["market"]
    n = m["n_stocks"]
    try:
        return MarketSpec(n_stocks=n, horizon=float(m["horizon"]), prior=build_prior(cfg, n),
                          volatility=np.asarray(m["volatility"], dtype=float), rate=float(m["rate"]),
                          initial_prices=m.get("initial_prices"), initial_wealth=float(m["initial_wealth"]),
                          ellipticity=float(m["ellipticity"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_utility(cfg: dict):
    u = cfg["utility"]
    return LogUtility(u["delta"]) if u["kind"] == "log" else PowerUtility(u["order"])
