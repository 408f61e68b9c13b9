"""Fit L(N, D, C) = a / (N * eff(C))^b + c / D^d + e and use it.

Fitting is two-stage: the five law constants come from dense runs, then one
effective parameter multiplier (EPM) per compression spec is fitted with the
constants frozen. Both stages minimize a Huber loss on log-loss residuals.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize, nnls

log = logging.getLogger(__name__)

HUBER_DELTA = 1e-3
# e below exp(-20) is indistinguishable from zero for losses of order 1
_LOG_E_RANGE = (-20.0, 50.0)
EFF_BOUNDS = (0.01, 1.25)
FLOPS_PER_PARAM_TOKEN = 6.0


class FitError(RuntimeError):
    """A fit could not be produced from the given records."""


@dataclass(frozen=True)
class LawParams:
    a: float
    b: float
    c: float
    d: float
    e: float

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0):
            raise ValueError(f"a and c must be positive: {self}")
        if not (0 < self.b < 2 and 0 < self.d < 2):
            raise ValueError(f"exponents must lie in (0, 2): {self}")
        if not self.e >= 0:
            raise ValueError(f"e must be non-negative: {self}")


@dataclass
class EpmEstimate:
    spec: str
    eff: float
    residuals: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    ratios: list = field(default_factory=list)


def _check_eff(eff) -> None:
    arr = np.asarray(eff, dtype=float)
    if np.any(arr <= 0) or np.any(arr > EFF_BOUNDS[1]):
        raise ValueError(f"eff must lie in (0, {EFF_BOUNDS[1]}], got {eff}")


def predict_loss(p: LawParams, n, d, eff=1.0):
    """Evaluate the law; scalars in, float out, arrays in, array out."""
    n_arr, d_arr = np.asarray(n, dtype=float), np.asarray(d, dtype=float)
    if np.any(n_arr <= 0) or np.any(d_arr <= 0):
        raise ValueError("N and D must be positive")
    _check_eff(eff)
    out = p.a / (n_arr * np.asarray(eff, dtype=float)) ** p.b + p.c / d_arr**p.d + p.e
    return float(out) if out.ndim == 0 else out


def huber(r, delta: float = HUBER_DELTA):
    r = np.asarray(r, dtype=float)
    ar = np.abs(r)
    return np.where(ar <= delta, 0.5 * r * r, delta * (ar - 0.5 * delta))


def objective(p: LawParams, n, d, loss, eff=1.0, delta: float = HUBER_DELTA) -> float:
    """Sum of Huber losses of log(predicted) - log(observed)."""
    pred = predict_loss(p, n, d, eff)
    return float(huber(np.log(pred) - np.log(np.asarray(loss, dtype=float)), delta).sum())


# ---------------------------------------------------------------------------
# Record plumbing

def _records_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ok = [r for r in records if not r.diverged and math.isfinite(r.val_loss)]
    if len(ok) < len(records):
        log.warning("ignoring %d diverged records", len(records) - len(ok))
    n = np.array([r.n_params for r in ok], dtype=float)
    d = np.array([r.tokens for r in ok], dtype=float)
    loss = np.array([r.val_loss for r in ok], dtype=float)
    return n, d, loss


def _single_spec(records) -> str:
    specs = {r.spec for r in records}
    if len(specs) != 1:
        raise ValueError(f"records mix compression specs: {sorted(specs)}")
    return specs.pop()


# ---------------------------------------------------------------------------
# Dense fit

class _Param:
    """Centered log parameterization: a / N^b = exp(alpha - b * (ln N - ln N0))."""

    def __init__(self, n, d):
        self.ln_n0 = float(np.mean(np.log(n)))
        self.ln_d0 = float(np.mean(np.log(d)))

    def to_vec(self, p: LawParams) -> np.ndarray:
        return np.array([
            math.log(p.a) - p.b * self.ln_n0, p.b,
            math.log(p.c) - p.d * self.ln_d0, p.d,
            max(math.log(max(p.e, 1e-300)), _LOG_E_RANGE[0]),
        ])

    def from_vec(self, x) -> LawParams:
        alpha, b, gamma, d, le = x
        return LawParams(math.exp(alpha + b * self.ln_n0), float(b),
                         math.exp(gamma + d * self.ln_d0), float(d), math.exp(le))


def initial_guesses(n, d, loss) -> list[LawParams]:
    """Grid starts: (b, d) in {0.1, ..., 0.9}^2, e from min(loss) * {0.5, 0.8, 0.95},
    (a, c) by non-negative least squares of loss - e on the two power terms."""
    n, d, loss = (np.asarray(x, dtype=float) for x in (n, d, loss))
    grid = (0.1, 0.3, 0.5, 0.7, 0.9)
    starts = []
    for b, dd, frac in itertools.product(grid, grid, (0.5, 0.8, 0.95)):
        e = float(loss.min()) * frac
        design = np.stack([n**-b, d**-dd], axis=1)
        col = np.linalg.norm(design, axis=0)
        coef, _ = nnls(design / col, loss - e)
        coef = coef / col
        floor = 1e-3 * float(np.mean(loss - e))
        a = max(coef[0], floor * float(np.mean(n**b)))
        c = max(coef[1], floor * float(np.mean(d**dd)))
        starts.append(LawParams(a, b, c, dd, e))
    return starts


def _refine(fun: Callable, x0: np.ndarray, rtol: float = 1e-9, max_rounds: int = 4,
            round_evals: int = 3000) -> tuple[np.ndarray, float]:
    """Nelder-Mead restarted from its own optimum until the objective stalls.

    Each round gets a fresh simplex and a bounded evaluation budget, which
    gets a stuck simplex out of narrow valleys faster than one long run.
    """
    x, fx = np.asarray(x0, dtype=float), fun(x0)
    for _ in range(max_rounds):
        res = minimize(fun, x, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-20, "maxfev": round_evals,
                                "adaptive": True})
        if not res.fun < fx:
            break
        improved = fx - res.fun
        x, fx = res.x, float(res.fun)
        if improved <= rtol * max(abs(fx), 1e-300):
            break
    return x, fx


def fit_law(n, d, loss, delta: float = HUBER_DELTA) -> LawParams:
    """Multi-start fit of the five dense constants to (N, D, loss) triples."""
    n, d, loss = (np.asarray(x, dtype=float) for x in (n, d, loss))
    if n.size < 5:
        raise FitError(f"need at least 5 records, got {n.size}")
    if np.unique(n).size < 3 or np.unique(d).size < 2:
        raise FitError("need at least 3 distinct N and 2 distinct D")
    if not (np.all(loss > 0) and np.all(np.isfinite(loss))):
        raise FitError("losses must be finite and positive")
    par = _Param(n, d)
    # plain floats: with a handful of records, numpy call overhead dominates
    rows = list(zip((np.log(n) - par.ln_n0).tolist(), (np.log(d) - par.ln_d0).tolist(),
                    np.log(loss).tolist()))
    lo_e, hi_e = _LOG_E_RANGE
    exp, ln = math.exp, math.log

    def fun(x):
        alpha, b, gamma, dd, le = x
        if not (0 < b < 2 and 0 < dd < 2 and lo_e <= le <= hi_e):
            return math.inf
        e = exp(le)
        total = 0.0
        for un, ud, ll in rows:
            try:
                r = ln(exp(alpha - b * un) + exp(gamma - dd * ud) + e) - ll
            except OverflowError:
                return math.inf
            ar = abs(r)
            total += 0.5 * r * r if ar <= delta else delta * (ar - 0.5 * delta)
        return total

    best: tuple[float, float, np.ndarray] | None = None
    for start in initial_guesses(n, d, loss):
        x, fx = _refine(fun, par.to_vec(start))
        if not math.isfinite(fx):
            continue
        e = math.exp(x[4])
        if best is None or fx < best[0] or (fx == best[0] and e < best[1]):
            best = (fx, e, x)
    if best is None:
        raise FitError("every start diverged")
    return par.from_vec(best[2])


def fit_dense(records) -> LawParams:
    """Fit the law constants to dense RunRecords."""
    if records and _single_spec(records) != "dense":
        raise ValueError("fit_dense needs dense records")
    return fit_law(*_records_arrays(records))


# ---------------------------------------------------------------------------
# EPM fit

def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-6) -> float:
    """Minimize a unimodal ``f`` on [lo, hi] to an interval narrower than ``tol``."""
    inv_phi = (math.sqrt(5) - 1) / 2
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = f(x2)
    return (lo + hi) / 2


def fit_eff(n, d, loss, dense_params: LawParams, tol: float = 1e-6) -> float:
    n, d, loss = (np.asarray(x, dtype=float) for x in (n, d, loss))
    if n.size < 3:
        raise FitError(f"need at least 3 records, got {n.size}")
    lo, hi = EFF_BOUNDS
    return golden_section(lambda eff: objective(dense_params, n, d, loss, eff), lo, hi, tol)


def _residual_summary(p: LawParams, n, d, loss, eff) -> dict:
    r = np.log(predict_loss(p, n, d, eff)) - np.log(loss)
    return {"max_abs_log": float(np.abs(r).max()), "rms_log": float(np.sqrt((r * r).mean())),
            "objective": objective(p, n, d, loss, eff)}


def fit_epm(records, dense_params: LawParams) -> EpmEstimate:
    """Fit eff for one spec's records with the dense constants frozen."""
    if not records:
        raise FitError("no records")
    spec = _single_spec(records)
    n, d, loss = _records_arrays(records)
    eff = 1.0 if spec == "dense" else fit_eff(n, d, loss, dense_params)
    if n.size < 3:
        raise FitError(f"need at least 3 records, got {n.size}")
    return EpmEstimate(
        spec=spec,
        eff=eff,
        residuals=_residual_summary(dense_params, n, d, loss, eff),
        records=[r.digest for r in records],
        ratios=sorted({round(r.tokens_per_param, 3) for r in records}),
    )


def fit_joint(dense_records, spec_records: dict[str, list], start: LawParams,
              start_eff: dict[str, float]) -> tuple[LawParams, dict[str, float]]:
    """Refit all constants and multipliers together; a cross-check of the
    two-stage result, not the primary estimate."""
    groups = [("dense", _records_arrays(dense_records))]
    groups += [(s, _records_arrays(r)) for s, r in spec_records.items()]
    names = [s for s, _ in groups[1:]]
    n = np.concatenate([g[1][0] for g in groups])
    d = np.concatenate([g[1][1] for g in groups])
    loss = np.concatenate([g[1][2] for g in groups])
    which = np.concatenate([np.full(g[1][0].size, i) for i, g in enumerate(groups)])
    par = _Param(n, d)

    def unpack(x):
        p = par.from_vec(x[:5])
        effs = np.concatenate([[1.0], np.exp(x[5:])])
        return p, effs

    def fun(x):
        if not _LOG_E_RANGE[0] <= x[4] <= _LOG_E_RANGE[1]:
            return np.inf
        try:
            p, effs = unpack(x)
            return objective(p, n, d, loss, effs[which])
        except ValueError:
            return np.inf

    x0 = np.concatenate([par.to_vec(start), np.log([start_eff[s] for s in names])])
    x, _ = _refine(fun, x0)
    p, effs = unpack(x)
    return p, dict(zip(names, map(float, effs[1:])))


# ---------------------------------------------------------------------------
# Data independence and data budgets

@dataclass
class IndependenceReport:
    spec: str
    eff: float
    max_rel_error: float
    rows: list  # [N, D, observed, predicted, rel_error]

    def passed(self, tol: float = 0.005) -> bool:
        return self.max_rel_error < tol


def data_independence_check(records, dense_params: LawParams, epm: EpmEstimate) -> IndependenceReport:
    """Predict losses at a new tokens-per-parameter ratio from the frozen fit."""
    if not records:
        raise ValueError("no records to check")
    spec = _single_spec(records)
    if spec != epm.spec:
        raise ValueError(f"records are {spec!r}, multiplier was fitted for {epm.spec!r}")
    for r in records:
        if any(abs(r.tokens_per_param - q) <= 0.01 * q for q in epm.ratios):
            raise ValueError(f"record ratio {r.tokens_per_param:.3g} was used for the fit")
    n, d, loss = _records_arrays(records)
    pred = predict_loss(dense_params, n, d, epm.eff)
    rel = np.abs(pred - loss) / loss
    rows = [[float(a), float(b), float(c), float(p_), float(e_)] for a, b, c, p_, e_ in zip(n, d, loss, pred, rel)]
    return IndependenceReport(spec, epm.eff, float(rel.max()), rows)


def optimal_data(n: float, eff: float, ratio: float = 20.0) -> float:
    """Compute-optimal tokens for a compressed model of raw size ``n``."""
    if n <= 0 or ratio <= 0:
        raise ValueError("N and ratio must be positive")
    _check_eff(eff)
    return ratio * n * eff


def compute_optimal_allocation(p: LawParams, eff: float, flops: float) -> tuple[float, float]:
    """Loss-minimizing (N, D) with 6 * N * D = flops."""
    if flops <= 0:
        raise ValueError("flops budget must be positive")
    _check_eff(eff)
    budget = flops / FLOPS_PER_PARAM_TOKEN

    def f(x):
        nn = math.exp(x)
        return predict_loss(p, nn, budget / nn, eff)

    center = 0.5 * math.log(budget)
    xs = center + np.linspace(-30.0, 30.0, 601)
    vals = np.array([f(x) for x in xs])
    k = int(np.argmin(vals))
    if k == 0 or k == xs.size - 1:
        raise FitError("optimum is not bracketed")
    steps = np.sign(np.diff(vals))
    steps = steps[steps != 0]
    if np.count_nonzero(np.diff(steps)) > 1:
        raise FitError("loss along the iso-FLOP line is not unimodal")
    x = golden_section(f, xs[k - 1], xs[k + 1], tol=1e-12)
    nn = math.exp(x)
    return nn, budget / nn


# ---------------------------------------------------------------------------
# Export

@dataclass
class FitResult:
    law: LawParams
    epm: dict[str, EpmEstimate]
    dense_records: list
    dense_residuals: dict

    def to_json(self) -> str:
        return json.dumps({
            "law": asdict(self.law),
            "epm": {k: asdict(v) for k, v in self.epm.items()},
            "dense_records": self.dense_records,
            "dense_residuals": self.dense_residuals,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        raw = json.loads(text)
        return cls(LawParams(**raw["law"]), {k: EpmEstimate(**v) for k, v in raw["epm"].items()},
                   raw["dense_records"], raw["dense_residuals"])


def fit_all(records: Sequence) -> FitResult:
    """Dense fit plus one multiplier per non-dense spec with at least 3 records."""
    dense = [r for r in records if r.spec == "dense"]
    law = fit_dense(dense)
    by_spec: dict[str, list] = {}
    for r in records:
        if r.spec != "dense":
            by_spec.setdefault(r.spec, []).append(r)
    epm = {"dense": EpmEstimate("dense", 1.0, records=[r.digest for r in dense])}
    for spec, recs in sorted(by_spec.items()):
        if len(recs) >= 3:
            epm[spec] = fit_epm(recs, law)
        else:
            log.warning("skipping %s: only %d records", spec, len(recs))
    n, d, loss = _records_arrays(dense)
    return FitResult(law, epm, [r.digest for r in dense], _residual_summary(law, n, d, loss, 1.0))
