"""Scenarios, Monte-Carlo estimates with standard errors, identity checks and convergence studies."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULTS, build_market, build_utility, config_hash
from .filters import (ConstantDriftFilter, KalmanBucyFilter, LaggedFilter, MixtureFilter,
                      PowerEquivalenceFilter, WonhamFilter, build_tilted_prior, export_riccati_csv,
                      log_mixture_density)
from .likelihood import zbar_exponential
from .market import MarketSpec, iter_bundles, precision_path, rate_integral, simulate_paths
from .pde import (build_embedding, default_fd_grid, feynman_kac_value, replicate, solve_cauchy_fd)
from .priors import DiscretePrior, GaussianPrior, MarkovChainPrior, OUPrior
from .strategies import (CertaintyEquivalentPortfolio, LogUtility, LogUtilityPortfolio, PowerUtility,
                         PowerUtilityPortfolio, default_filter, optimal_claim, solve_lambda)

IDENTITIES = ("zbar_martingale", "zbar_two_forms", "eu_log", "eu_power", "budget", "ce_failure",
              "min_variance", "optimality")
N_SE = 3.0


class ScenarioError(ValueError):
    """Components of a scenario that cannot work together."""


@dataclass(frozen=True)
class McEstimate:
    """Sample mean with standard error ``std / sqrt(n)``."""

    mean: float
    se: float
    n: int
    label: str = ""

    @classmethod
    def from_samples(cls, samples, label: str = "") -> "McEstimate":
        x = np.asarray(samples, dtype=float).ravel()
        if x.size < 2:
            raise ValueError("a Monte-Carlo estimate needs at least two samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)), int(x.size), label)

    def within(self, target: float, n_se: float = N_SE, slack: float = 0.0) -> bool:
        return abs(self.mean - target) <= n_se * self.se + slack

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IdentityResult:
    name: str
    passed: bool
    lhs: object
    rhs: object
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, McEstimate):
                return v.to_dict()
            if isinstance(v, np.generic):
                return v.item()
            if isinstance(v, dict):
                return {k: conv(w) for k, w in v.items()}
            if isinstance(v, (list, tuple)):
                return [conv(w) for w in v]
            return v
        return {"name": self.name, "passed": bool(self.passed), "lhs": conv(self.lhs),
                "rhs": conv(self.rhs), "details": conv(self.details)}


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    """Everything needed to reproduce one experiment."""

    market: MarketSpec
    utility: LogUtility | PowerUtility = LogUtility()
    filter: str = "auto"
    strategy: str = "optimal"
    scale: float = 1.0
    floor: float | None = None
    dt: float = 2.0 ** -10
    n_paths: int = 10000
    seed: int = 0
    chunk_size: int = 5000
    outputs: tuple = ("report",)
    pde: dict = field(default_factory=lambda: dict(DEFAULTS["pde"]))
    name: str = "scenario"
    config: dict | None = None

    @classmethod
    def from_config(cls, cfg: dict, **overrides) -> "Scenario":
        grid = cfg["grid"]
        kw = dict(market=build_market(cfg), utility=build_utility(cfg), filter=cfg["filter"],
                  strategy=cfg["strategy"]["kind"], scale=cfg["strategy"]["scale"],
                  floor=cfg["strategy"]["floor"], dt=grid["dt"], n_paths=grid["n_paths"],
                  seed=cfg["seed"], chunk_size=grid["chunk_size"], outputs=tuple(cfg["outputs"]),
                  pde=dict(cfg["pde"]), name=cfg.get("name", "scenario"), config=cfg)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        s = cls(**kw)
        s.validate()
        return s

    @property
    def config_hash(self) -> str:
        cfg = dict(self.config or {})
        cfg["_effective"] = {"dt": self.dt, "n_paths": self.n_paths, "seed": self.seed}
        return config_hash(cfg)

    def validate(self) -> None:
        """Raise :class:`ScenarioError` before any simulation if components clash."""
        prior, m = self.market.prior, self.market
        steps = m.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ScenarioError(f"dt={self.dt} does not divide the horizon {m.horizon}")
        if self.n_paths < 2:
            raise ScenarioError("need at least two paths")
        needs = {"mixture": (DiscretePrior,), "kalman": (GaussianPrior, OUPrior),
                 "wonham": (MarkovChainPrior,), "power": (DiscretePrior, GaussianPrior)}
        if self.filter in needs and not isinstance(prior, needs[self.filter]):
            raise ScenarioError(f"filter {self.filter!r} is incompatible with a {type(prior).__name__}")
        if self.strategy == "optimal" and self.filter in ("constant", "power") and isinstance(self.utility, LogUtility):
            raise ScenarioError("the optimal log strategy uses the posterior-mean filter")
        if self.filter == "power" or (isinstance(self.utility, PowerUtility) and self.strategy == "optimal"):
            if not isinstance(prior, (DiscretePrior, GaussianPrior)):
                raise ScenarioError("power utility needs a discrete or static Gaussian prior")
            if not m.deterministic_vol:
                raise ScenarioError("power utility needs deterministic volatility")
            if isinstance(prior, GaussianPrior):
                try:
                    build_tilted_prior(prior, m.precision(0.0), m.horizon, self.utility.order
                                       if isinstance(self.utility, PowerUtility) else 2)
                except ValueError as exc:
                    raise ScenarioError(str(exc)) from exc


def make_filter(s: Scenario):
    m = s.market
    order = s.utility.order if isinstance(s.utility, PowerUtility) else 2
    return {"auto": lambda: default_filter(m), "mixture": lambda: MixtureFilter(m),
            "kalman": lambda: KalmanBucyFilter(m), "wonham": lambda: WonhamFilter(m),
            "power": lambda: PowerEquivalenceFilter(m, order=order),
            "constant": lambda: ConstantDriftFilter(m)}[s.filter]()


def make_portfolio(s: Scenario):
    if s.strategy == "optimal":
        if isinstance(s.utility, PowerUtility):
            return PowerUtilityPortfolio(s.market, order=s.utility.order, floor=s.floor)
        filt = None if s.filter == "auto" else make_filter(s)
        return LogUtilityPortfolio(s.market, delta=s.utility.delta, filter=filt, floor=s.floor)
    return CertaintyEquivalentPortfolio(s.market, filter=make_filter(s), utility=s.utility,
                                        scale=s.scale, floor=s.floor)


def _bundles(s: Scenario, measure="P", n_paths=None, dt=None, refine=1, seed=None):
    return iter_bundles(s.market, s.dt if dt is None else dt, s.n_paths if n_paths is None else n_paths,
                        s.seed if seed is None else seed, measure=measure, chunk_size=s.chunk_size,
                        refine=refine)


def _lambda_and_G(s: Scenario, times):
    m = s.market
    if isinstance(s.utility, LogUtility):
        return solve_lambda(s.utility, initial_wealth=m.initial_wealth), None
    Q = precision_path(m, np.zeros((1, times.size, m.n_stocks)), times)
    G = build_tilted_prior(m.prior, Q, m.horizon, s.utility.order, times).G
    return solve_lambda(s.utility, initial_wealth=m.initial_wealth, G=G), G


def budget_samples(s: Scenario, n_paths=None) -> np.ndarray:
    """``xi = F(Zbar(T), lam)`` on ``Pstar`` paths."""
    out = []
    lam = G = None
    for b in _bundles(s, "Pstar", n_paths):
        if lam is None:
            lam, G = _lambda_and_G(s, b.times)
        zbar = np.exp(log_mixture_density(s.market, b, terminal_only=True))
        out.append(optimal_claim(s.utility, lam, zbar))
    return np.concatenate(out)


def _integrated_quadratic(ahat, Q, dt):
    a = ahat[:, :-1]
    Qa = np.einsum("kij,nkj->nki", Q, a) if Q.ndim == 3 else np.einsum("nkij,nkj->nki", Q, a)
    return np.einsum("nki,nki->n", Qa, a) * dt


def run_scenario(s: Scenario, out_dir=None) -> dict:
    """Simulate, filter, trade and report.

    Writes the artifacts listed in ``s.outputs`` to ``out_dir``. The report
    is a plain dict; identical scenarios give identical reports.
    """
    s.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    m = s.market
    portfolio = None
    utility, terminal, err, breach, quad = [], [], [], [], []
    for i, b in enumerate(_bundles(s)):
        if portfolio is None:
            portfolio = make_portfolio(s).fit(b)
        trace = portfolio.wealth_trace(b)
        u = portfolio._utility()
        utility.append(u.utility(trace.terminal))
        terminal.append(trace.terminal)
        breach.append(trace.floor_breaches)
        Q = precision_path(m, b.r_tilde, b.times)
        quad.append(0.5 * _integrated_quadratic(trace.meta["ahat"], Q, b.dt))
        if trace.replication_error is not None:
            err.append(trace.replication_error)
        if out is not None:
            _write_chunk_outputs(s, out, b, trace, portfolio, first=(i == 0))
    report = {
        "scenario": s.name, "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
        "dt": s.dt, "n_paths": s.n_paths, "utility": type(portfolio._utility()).__name__,
        "strategy": s.strategy, "filter": s.filter,
        "expected_utility": McEstimate.from_samples(np.concatenate(utility), "E U(X(T))").to_dict(),
        "terminal_wealth": McEstimate.from_samples(np.concatenate(terminal), "E X(T)").to_dict(),
        "floor_breach_fraction": float(np.concatenate(breach).mean()),
    }
    u = portfolio._utility()
    if isinstance(u, LogUtility):
        formula = McEstimate.from_samples(np.concatenate(quad) + np.log(m.initial_wealth + u.delta),
                                          "0.5 E int ahat'Q ahat dt + log(X0 + delta)")
        report["expected_utility_formula"] = formula.to_dict()
    elif isinstance(portfolio, PowerUtilityPortfolio):
        report["expected_utility_formula"] = {"value": portfolio.expected_utility(), "G": portfolio.G_}
    if err:
        e = np.concatenate(err)
        q = np.quantile(e, [0.5, 0.9, 0.99])
        report["replication_error"] = {"mean": float(e.mean()), "q50": float(q[0]), "q90": float(q[1]),
                                       "q99": float(q[2]), "max": float(e.max())}
    if s.strategy == "optimal":
        xi = McEstimate.from_samples(budget_samples(s), "E* xi")
        report["budget"] = {**xi.to_dict(), "target": m.initial_wealth,
                            "passed": xi.within(m.initial_wealth)}
    if out is not None and "report" in s.outputs:
        write_json(report, out / "report.json")
    return report


def _write_chunk_outputs(s, out, b, trace, portfolio, first):
    if "wealth_csv" in s.outputs:
        _append_csv(trace.to_csv, out / "wealth.csv", b.path_offset, first)
    if "filter_csv" in s.outputs:
        ft = portfolio.filter_.trace(b)
        _append_csv(ft.to_csv, out / "filter.csv", b.path_offset, first)
    if "paths_csv" in s.outputs:
        _append_csv(lambda p, path_offset=0: b.to_csv(p), out / "paths.csv", b.path_offset, first)
    if "paths_cache" in s.outputs:
        b.save(out / f"paths_{b.path_offset:08d}.hdpb")
    if first and "riccati_csv" in s.outputs and isinstance(portfolio.filter_, KalmanBucyFilter) \
            and portfolio.filter_.cov_ is not None:
        export_riccati_csv(portfolio.filter_.times_, portfolio.filter_.cov_, out / "riccati.csv")


def _append_csv(writer, target: Path, path_offset: int, first: bool) -> None:
    tmp = target.with_suffix(".part")
    writer(tmp, path_offset=path_offset)
    text = tmp.read_text(encoding="utf-8")
    tmp.unlink()
    if not first:
        text = text.split("\n", 1)[1]
    with open(target, "w" if first else "a", encoding="utf-8") as fh:
        fh.write(text)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- identities


def _zbar_martingale(s):
    z = np.concatenate([np.exp(log_mixture_density(s.market, b, terminal_only=True)) for b in _bundles(s, "Pstar")])
    est = McEstimate.from_samples(z, "E* Zbar(T)")
    return IdentityResult("zbar_martingale", est.within(1.0), est, 1.0)


def zbar_form_gap(market: MarketSpec, bundle) -> np.ndarray:
    """Per-path ``|Zbar_mixture(T) - Zbar_exponential(T)| / Zbar_mixture(T)``."""
    filt = default_filter(market).fit(bundle)
    ahat = filt.transform(bundle)
    Q = precision_path(market, bundle.r_tilde, bundle.times)
    log_mix = log_mixture_density(market, bundle, terminal_only=True)
    expo = zbar_exponential(ahat, Q, bundle.increments, bundle.dt)[:, -1]
    return np.abs(np.exp(log_mix) - expo) / np.exp(log_mix)


def _zbar_two_forms(s, tol=1e-2, ratio_band=(0.35, 0.65)):
    coarse, fine = [], []
    for b in _bundles(s, refine=2):
        coarse.append(zbar_form_gap(s.market, b))
    for b in _bundles(s, dt=s.dt / 2):
        fine.append(zbar_form_gap(s.market, b))
    g1, g2 = float(np.concatenate(coarse).mean()), float(np.concatenate(fine).mean())
    ratio = g2 / g1 if g1 > 0 else 0.0
    passed = g1 < tol and ratio_band[0] <= ratio <= ratio_band[1]
    return IdentityResult("zbar_two_forms", passed, g1, tol,
                          {"gap_dt": g1, "gap_half_dt": g2, "ratio": ratio, "ratio_band": list(ratio_band)})


def log_utility_samples(s: Scenario, filter=None):
    """Per-path ``log(X(T) + delta)`` and ``0.5 int ahat'Q ahat dt`` for the log-optimal portfolio."""
    u = s.utility if isinstance(s.utility, LogUtility) else LogUtility()
    lhs, rhs = [], []
    port = None
    for b in _bundles(s):
        if port is None:
            port = LogUtilityPortfolio(s.market, delta=u.delta, filter=filter).fit(b)
        tr = port.wealth_trace(b)
        lhs.append(u.utility(tr.terminal))
        rhs.append(0.5 * _integrated_quadratic(tr.meta["ahat"], precision_path(s.market, b.r_tilde, b.times),
                                               b.dt))
    return np.concatenate(lhs), np.concatenate(rhs)


def _eu_log(s):
    u = s.utility if isinstance(s.utility, LogUtility) else LogUtility()
    lhs, quad = log_utility_samples(s)
    c = np.log(s.market.initial_wealth + u.delta)
    left = McEstimate.from_samples(lhs, "E log(X(T) + delta)")
    right = McEstimate.from_samples(quad + c, "0.5 E int ahat'Q ahat dt + log(X0 + delta)")
    diff = McEstimate.from_samples(lhs - quad - c, "paired difference")
    return IdentityResult("eu_log", diff.within(0.0), left, right, {"paired_difference": diff})


def power_utility_samples(s: Scenario):
    order = s.utility.order if isinstance(s.utility, PowerUtility) else 2
    port = None
    vals = []
    for b in _bundles(s):
        if port is None:
            port = PowerUtilityPortfolio(s.market, order=order).fit(b)
        vals.append(PowerUtility(order).utility(port.wealth_trace(b).terminal))
    return np.concatenate(vals), port


def _eu_power(s):
    vals, port = power_utility_samples(s)
    est = McEstimate.from_samples(vals, "E U(X(T))")
    target = port.expected_utility()
    return IdentityResult("eu_power", est.within(target), est, target, {"G": port.G_})


def _budget(s):
    est = McEstimate.from_samples(budget_samples(s), "E* xi")
    return IdentityResult("budget", est.within(s.market.initial_wealth), est, s.market.initial_wealth,
                          {"utility": type(s.utility).__name__})


def ce_gap(market: MarketSpec, bundle, order: int) -> np.ndarray:
    """``|ahat_pow - ahat_bayes|`` on every (path, time) point; shape ``(N, K + 1)``."""
    a_pow = PowerEquivalenceFilter(market, order=order).fit(bundle).transform(bundle)
    a_bayes = default_filter(market).fit(bundle).transform(bundle)
    return np.linalg.norm(a_pow - a_bayes, axis=-1)


def _ce_failure(s, threshold=1e-3, fraction=0.99, n_points=20000):
    order = s.utility.order if isinstance(s.utility, PowerUtility) else 2
    gaps = np.concatenate([ce_gap(s.market, b, order) for b in _bundles(s)])
    rng = np.random.default_rng([int(s.seed), 99])
    flat = gaps.ravel()
    idx = rng.choice(flat.size, size=min(n_points, flat.size), replace=False)
    frac = float((flat[idx] > threshold).mean())
    return IdentityResult("ce_failure", frac >= fraction, frac, fraction,
                          {"threshold": threshold, "n_points": int(idx.size),
                           "terminal_max_gap": float(gaps[:, -1].max())})


def filter_sq_errors(s: Scenario, lag_fraction: float = 0.25) -> dict:
    """Squared drift errors at ``T/2`` and ``T`` for the posterior mean and competitors."""
    m = s.market
    names = ("posterior", "frozen_prior_mean", "zero", "lagged")
    out = {name: {"half": [], "end": []} for name in names}
    fitted = None
    for b in _bundles(s):
        K = b.n_steps
        if fitted is None:
            lag = max(1, int(round(lag_fraction * K)))
            fitted = {"posterior": default_filter(m).fit(b), "frozen_prior_mean": ConstantDriftFilter(m).fit(b),
                      "zero": ConstantDriftFilter(m, value=0.0).fit(b),
                      "lagged": LaggedFilter(m, base=default_filter(m), lag=lag).fit(b)}
        for name, f in fitted.items():
            sq = np.sum((f.transform(b) - b.drift) ** 2, axis=-1)
            out[name]["half"].append(sq[:, K // 2])
            out[name]["end"].append(sq[:, K])
    return {n: {k: np.concatenate(v) for k, v in d.items()} for n, d in out.items()}


def _min_variance(s, margin_se=2.0):
    errs = filter_sq_errors(s)
    details, passed = {}, True
    for comp in ("frozen_prior_mean", "zero", "lagged"):
        for when in ("half", "end"):
            diff = McEstimate.from_samples(errs[comp][when] - errs["posterior"][when], f"{comp}-{when}")
            ok = diff.mean >= margin_se * diff.se
            details[f"{comp}@{when}"] = {**diff.to_dict(), "passed": bool(ok)}
            passed &= ok
    post = {w: McEstimate.from_samples(errs["posterior"][w], f"posterior-{w}") for w in ("half", "end")}
    return IdentityResult("min_variance", bool(passed), post, "competitors", details)


def competitor_utilities(s: Scenario) -> dict:
    """Per-path ``log(X(T) + delta)`` of the log-optimal portfolio and of simpler rules on the same paths.

    Competitors: no risky holdings, the myopic rule with the prior mean
    frozen in place of the filter, and the myopic rule at twice the
    optimal size. Nonpositive ``X + delta`` counts as ``-inf``.
    """
    m = s.market
    u = s.utility if isinstance(s.utility, LogUtility) else LogUtility()
    out = {k: [] for k in ("optimal", "zero", "frozen_prior_mean", "scaled_2x")}
    ports = None
    for b in _bundles(s):
        if ports is None:
            ports = {"optimal": LogUtilityPortfolio(m, delta=u.delta),
                     "zero": CertaintyEquivalentPortfolio(m, utility=u, scale=0.0),
                     "frozen_prior_mean": CertaintyEquivalentPortfolio(m, filter=ConstantDriftFilter(m), utility=u),
                     "scaled_2x": CertaintyEquivalentPortfolio(m, utility=u, scale=2.0)}
            ports = {k: p.fit(b) for k, p in ports.items()}
        for k, p in ports.items():
            x = p.wealth_trace(b).terminal + u.delta
            out[k].append(np.where(x > 0, np.log(np.maximum(x, 1e-300)), -np.inf))
    return {k: np.concatenate(v) for k, v in out.items()}


def _optimality(s, margin_se=2.0):
    vals = competitor_utilities(s)
    details, passed = {}, True
    for comp in ("zero", "frozen_prior_mean", "scaled_2x"):
        if np.isneginf(vals[comp]).any():
            ok, info = True, {"mean": float("-inf")}
        else:
            diff = McEstimate.from_samples(vals["optimal"] - vals[comp], f"optimal-{comp}")
            ok, info = diff.mean >= margin_se * diff.se, diff.to_dict()
        details[comp] = {**info, "passed": bool(ok)}
        passed &= ok
    return IdentityResult("optimality", bool(passed), McEstimate.from_samples(vals["optimal"], "E log X(T)"),
                          "competitors", details)


def verify_identity(name: str, s: Scenario) -> IdentityResult:
    """Check one identity on a scenario; statistical checks use 3 standard errors."""
    if name not in IDENTITIES:
        raise ValueError(f"unknown identity {name!r}; expected one of {IDENTITIES}")
    prior = s.market.prior
    if name in ("zbar_two_forms", "ce_failure") and not isinstance(prior, (DiscretePrior, GaussianPrior)):
        raise ScenarioError(f"{name} needs a discrete or static Gaussian prior")
    if name in ("eu_power", "ce_failure") and not (isinstance(prior, (DiscretePrior, GaussianPrior))
                                                   and s.market.deterministic_vol):
        raise ScenarioError(f"{name} needs a tilted-prior-capable market")
    return {"zbar_martingale": _zbar_martingale, "zbar_two_forms": _zbar_two_forms, "eu_log": _eu_log,
            "eu_power": _eu_power, "budget": _budget, "ce_failure": _ce_failure,
            "min_variance": _min_variance, "optimality": _optimality}[name](s)


# ---------------------------------------------------------------- convergence


@dataclass
class ConvergenceTable:
    kind: str
    levels: list
    errors: list
    orders: list

    def to_dict(self) -> dict:
        return {"kind": self.kind, "levels": self.levels, "errors": [e.to_dict() for e in self.errors],
                "orders": self.orders}

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("dt,error_mean,error_se,n,order\n")
            for i, (dt, e) in enumerate(zip(self.levels, self.errors)):
                order = "" if i == 0 else repr(self.orders[i - 1])
                fh.write(f"{dt!r},{e.mean!r},{e.se!r},{e.n},{order}\n")


def _level_errors(s: Scenario, kind: str, dt: float, refine: int) -> np.ndarray:
    m = s.market
    errs = []
    port = None
    for b in _bundles(s, dt=dt, refine=refine):
        if kind == "zbar_two_forms":
            errs.append(zbar_form_gap(m, b))
            continue
        if port is None:
            if kind == "zero_strategy":
                port = CertaintyEquivalentPortfolio(m, scale=0.0).fit(b)
            elif kind == "power_replication":
                port = PowerUtilityPortfolio(m, order=getattr(s.utility, "order", 2)).fit(b)
            else:
                port = LogUtilityPortfolio(m, delta=getattr(s.utility, "delta", 0.0)).fit(b)
        tr = port.wealth_trace(b)
        target = np.full(b.n_paths, m.initial_wealth) if kind == "zero_strategy" else tr.target
        errs.append(np.abs(tr.terminal - target))
    return np.concatenate(errs)


def convergence_study(s: Scenario, levels, kind: str = "log_replication") -> ConvergenceTable:
    """Errors on coupled grids: coarser levels sum the Brownian increments of the finest one."""
    levels = sorted((float(v) for v in levels), reverse=True)
    if len(levels) < 3:
        raise ValueError("a convergence study needs at least three levels")
    finest = levels[-1]
    errors = []
    for dt in levels:
        refine = int(round(dt / finest))
        if abs(refine * finest - dt) > 1e-12:
            raise ValueError("levels must be integer multiples of the finest dt")
        errors.append(McEstimate.from_samples(_level_errors(s, kind, dt, refine), f"dt={dt!r}"))
    orders = []
    for a, b, da, db in zip(errors, errors[1:], levels, levels[1:]):
        orders.append(float(np.log(a.mean / b.mean) / np.log(da / db)) if a.mean > 0 and b.mean > 0 else None)
    return ConvergenceTable(kind, levels, errors, orders)


# ---------------------------------------------------------------- PDE replication


def run_replication(s: Scenario, out_dir=None) -> dict:
    """Value the optimal claim through a Markov embedding and replicate it.

    Finite differences are used when the embedding has at most three
    coordinates; the Feynman-Kac estimate at ``y0`` is always reported as a
    cross-check.
    """
    m, cfg = s.market, s.pde
    emb = build_embedding(m, cfg["embedding"], log_coordinates=cfg["log_coordinates"])
    times = np.linspace(0.0, m.horizon, int(round(m.horizon / s.dt)) + 1)
    lam, G = _lambda_and_G(s, times)
    u = s.utility

    def claim(y):
        return u.claim_map(emb.terminal(y), lam)

    fk = feynman_kac_value(emb, claim, emb.y0, 0.0, cfg["fk_paths"], s.seed, dt=s.dt)
    report = {"scenario": s.name, "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
              "embedding": emb.label, "dim": emb.dim, "lambda": lam, "G": G,
              "fk_value": {"value": fk.value, "se": fk.se}, "initial_wealth": m.initial_wealth}
    if emb.dim > 3:
        report["fd"] = None
        report["checks"] = {"fk_budget": abs(fk.value - m.initial_wealth) <= N_SE * fk.se}
        return report
    grid = default_fd_grid(emb, cfg["n_points"], cfg["n_steps"], n_sd=cfg["n_sd"],
                           store_every=cfg["store_every"], seed=s.seed)
    value = solve_cauchy_fd(emb, claim, grid)
    v0 = float(value(emb.y0, 0.0)[0])

    def hedge(dt, refine):
        b = simulate_paths(m, dt, cfg["replication_paths"], s.seed, refine=refine)
        target = optimal_claim(u, lam, np.exp(log_mixture_density(m, b, terminal_only=True)))
        return replicate(emb, value, b.increments, b.times, rate_integral(b), m.initial_wealth, target)

    trace = hedge(s.dt, 1)
    err = trace.replication_error
    # same Brownian paths, trading twice as seldom
    coarse_err = hedge(2 * s.dt, 2).replication_error
    tol = 5e-3 * m.initial_wealth
    report["fd"] = {"value_at_y0": v0, "lower": list(grid.lower), "upper": list(grid.upper),
                    "n_points": list(grid.n_points), "n_steps": grid.n_steps}
    report["replication_error"] = {"mean": float(err.mean()), "q50": float(np.median(err)),
                                   "max": float(err.max()), "tolerance": tol,
                                   "mean_at_double_dt": float(coarse_err.mean())}
    report["checks"] = {"fd_fk_agreement": abs(v0 - fk.value) <= N_SE * fk.se + 1e-3,
                        "replication": float(err.mean()) < tol,
                        "refinement": float(err.mean()) < float(coarse_err.mean())}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if "grid" in s.outputs:
            value.save(out / "value_grid")
        if "wealth_csv" in s.outputs:
            trace.to_csv(out / "replication_wealth.csv")
        if "report" in s.outputs:
            write_json(report, out / "replication.json")
    return report
