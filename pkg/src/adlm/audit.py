"""Verification harness for the sensitivity constants and the privacy ratios.

Sensitivities are brute-forced over small enumerable domains. Privacy ratios
are checked in closed form for Laplace-perturbed statistics, with a histogram
Monte Carlo check as an empirical fallback. Enumeration over a discretized
domain is evidence for a bound, not a proof of it.
"""
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from adlm import mechanism as mech
from adlm.loss import LOG2

MAX_PAIRS = 10 ** 6
RATIO_RTOL = 1e-12
PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass
class NeighborPair:
    """Two equal-size datasets that differ in exactly one row."""

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        self.first = np.asarray(self.first, dtype=np.float64)
        self.second = np.asarray(self.second, dtype=np.float64)
        if self.first.shape != self.second.shape:
            raise ValueError("neighboring datasets must have the same shape")
        rows = self.first.reshape(len(self.first), -1) != self.second.reshape(len(self.second), -1)
        if int(rows.any(axis=1).sum()) != 1:
            raise ValueError("neighboring datasets must differ in exactly one row")

    @property
    def differing_row(self):
        diff = (self.first != self.second).reshape(len(self.first), -1).any(axis=1)
        return int(np.flatnonzero(diff)[0])


@dataclass
class SensitivityResult:
    value: float
    pair: NeighborPair
    n_pairs: int

    def __float__(self):
        return float(self.value)


@dataclass
class RatioReport:
    """Outcome of a privacy-ratio check.

    ``max_log_ratio`` is the largest observed ``|log p_D(o) - log p_D'(o)|``.
    Analytic checks pass iff it is at most ``epsilon`` (up to float rounding);
    Monte Carlo checks pass iff it is at most ``epsilon + slack``.
    """

    mechanism: str
    epsilon: float
    max_log_ratio: float
    method: str
    params: dict = field(default_factory=dict)
    status: str = PASS
    slack: float = 0.0

    @property
    def passed(self):
        return self.status == PASS

    def to_dict(self):
        d = asdict(self)
        d["max_log_ratio"] = _json_float(self.max_log_ratio)
        return d


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# ---------------------------------------------------------------------------
# brute-force sensitivity
# ---------------------------------------------------------------------------


def bruteforce_sensitivity(statistic, domain_grid, n, max_pairs=MAX_PAIRS, symmetric=True):
    """Exact max of ``||f(D) - f(D')||_1`` over all neighbors drawn from ``domain_grid``.

    Neighbors share ``n - 1`` rows and differ in the last. With ``symmetric``
    (the statistic ignores row order) the shared rows are enumerated as
    multisets. More than ``max_pairs`` pairs raises ``EnumerationBudgetExceeded``.
    """
    grid = [np.asarray(t, dtype=np.float64) for t in domain_grid]
    g = len(grid)
    if n < 1 or g < 1:
        raise ValueError("need n >= 1 and a non-empty domain")
    if symmetric:
        n_prefix = math.comb(g + n - 2, n - 1)
        prefixes = itertools.combinations_with_replacement(range(g), n - 1)
    else:
        n_prefix = g ** (n - 1)
        prefixes = itertools.product(range(g), repeat=n - 1)
    n_pairs = n_prefix * g * (g - 1) // 2
    if n_pairs > max_pairs:
        raise EnumerationBudgetExceeded(f"{n_pairs} neighbor pairs exceeds the budget of {max_pairs}")
    best, best_pair = 0.0, None
    for prefix in prefixes:
        rows = [grid[i] for i in prefix]
        stats = np.stack([np.ravel(statistic(np.stack(rows + [t]))) for t in grid])
        dist = np.abs(stats[:, None, :] - stats[None, :, :]).sum(axis=2)
        a, b = np.unravel_index(np.argmax(dist), dist.shape)
        if best_pair is None or dist[a, b] > best:
            best = float(dist[a, b])
            if a != b:
                best_pair = NeighborPair(np.stack(rows + [grid[a]]), np.stack(rows + [grid[b]]))
    return SensitivityResult(best, best_pair, n_pairs)


def relevance_statistic(relevances):
    """``(1/|D|) sum_i R(x_i)`` for per-example relevance rows."""
    return relevances.mean(axis=0)


def h0_statistic(h0_units):
    """Per-neuron, per-feature batch sums ``sum_i x_ij`` for each first-layer unit."""
    def stat(x):
        return np.tile(x.sum(axis=0), h0_units)
    return stat


def loss_statistic(n_classes):
    """Batch sums of the three coefficient terms for every class.

    Rows are ``[h_1 .. h_k, y_1 .. y_M]``; per class the terms are ``log 2``,
    ``(1/2 - y) sum_e h_e`` and ``(1/8) sum_{e,g} h_e h_g``.
    """
    def stat(rows):
        h, y = rows[:, :-n_classes], rows[:, -n_classes:]
        s = h.sum(axis=1)
        c0 = np.full(n_classes, LOG2 * len(rows))
        c1 = ((0.5 - y) * s[:, None]).sum(axis=0)
        c2 = np.full(n_classes, 0.125 * float((s * s).sum()))
        return np.concatenate([c0, c1, c2])
    return stat


def grid_points(levels, d):
    return [np.array(p) for p in itertools.product(levels, repeat=d)]


def loss_grid(levels, k, n_classes):
    labels = np.eye(n_classes)
    return [np.concatenate([np.array(h), y]) for h in itertools.product(levels, repeat=k) for y in labels]


# ---------------------------------------------------------------------------
# ratio checks
# ---------------------------------------------------------------------------


def analytic_ratio_check(f_d, f_d2, scale, epsilon, grid=10_000, name="laplace", span=5.0):
    """Closed-form log-density ratio of ``f + Lap(scale)`` between two inputs.

    Product Laplace densities factor per coordinate, so the maximum over a
    joint grid is the sum of per-coordinate maxima. Each coordinate is scanned
    on ``grid`` points covering both centers plus ``span`` scales either side.
    """
    a = np.atleast_1d(np.asarray(f_d, dtype=np.float64)).ravel()
    b = np.atleast_1d(np.asarray(f_d2, dtype=np.float64)).ravel()
    s = np.broadcast_to(np.asarray(scale, dtype=np.float64), a.shape).ravel()
    if np.any(s <= 0):
        raise ValueError("noise scale must be positive")
    worst = 0.0
    lo = np.minimum(a, b) - span * s
    hi = np.maximum(a, b) + span * s
    t = np.linspace(0.0, 1.0, grid)
    for k in np.flatnonzero(a != b):
        o = np.concatenate([lo[k] + (hi[k] - lo[k]) * t, [a[k], b[k]]])
        lr = (np.abs(o - b[k]) - np.abs(o - a[k])) / s[k]
        worst += float(np.abs(lr).max())
    status = PASS if worst <= epsilon * (1.0 + RATIO_RTOL) else FAIL
    return RatioReport(name, float(epsilon), worst, "analytic",
                       {"grid": grid, "span_scales": span, "coordinates": int(a.size),
                        "exact": float(np.sum(np.abs(a - b) / s))}, status)


def wilson_interval(count, total, z):
    if total == 0:
        return 0.0, 1.0
    p = count / total
    den = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / den
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / den
    return max(0.0, center - half), min(1.0, center + half)


def monte_carlo_ratio(mechanism_fn, pair, epsilon, trials=100_000, bins=50, seed=0,
                      alpha=1e-3, min_count=50, min_trials=100_000, name="monte-carlo"):
    """Histogram estimate of the worst log-ratio of a scalar mechanism's output.

    ``mechanism_fn(data, rng, size)`` returns ``size`` scalar outputs. Wilson
    intervals (Bonferroni over bins and both directions) bound each bin's
    probability. FAIL when some bin's ratio is provably above ``e^epsilon``;
    INCONCLUSIVE when no bin has enough mass on both sides to say anything.
    """
    if trials < min_trials:
        raise ValueError(f"need at least {min_trials} trials, got {trials}")
    rng1 = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    rng2 = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    o1 = np.asarray(mechanism_fn(pair.first, rng1, trials), dtype=np.float64).ravel()
    o2 = np.asarray(mechanism_fn(pair.second, rng2, trials), dtype=np.float64).ravel()
    pooled = np.concatenate([o1, o2])
    lo, hi = np.quantile(pooled, [0.001, 0.999])
    if hi > lo:
        edges = np.concatenate([[-np.inf], np.linspace(lo, hi, bins + 1), [np.inf]])
    else:
        edges = np.array([-np.inf, lo, np.inf])
    c1 = np.histogram(o1, edges)[0]
    c2 = np.histogram(o2, edges)[0]
    z = float(norm.ppf(1 - alpha / (4 * len(c1))))
    worst_point, worst_lower, slack, conclusive = 0.0, -np.inf, 0.0, 0
    for n1, n2 in zip(c1, c2):
        for na, nb in ((n1, n2), (n2, n1)):
            if na < min_count:
                continue
            pa_lo, _ = wilson_interval(na, trials, z)
            _, pb_hi = wilson_interval(nb, trials, z)
            lower = math.log(pa_lo / pb_hi)
            point = math.inf if nb == 0 else math.log(na / nb)
            if nb >= min_count:
                conclusive += 1
            if lower > worst_lower:
                worst_lower = lower
            if point > worst_point:
                worst_point, slack = point, (point - lower if math.isfinite(point) else math.inf)
    if worst_lower > epsilon:
        status = FAIL
    elif conclusive == 0:
        status = INCONCLUSIVE
    else:
        status = PASS
    return RatioReport(name, float(epsilon), worst_point, "monte-carlo",
                       {"trials": trials, "bins": int(len(c1)), "alpha": alpha, "min_count": min_count,
                        "conclusive_bins": conclusive, "max_lower_bound": _json_float(worst_lower)},
                       status, _json_float(slack) if not math.isfinite(slack) else slack)


def laplace_output(scale):
    """Scalar mechanism ``sum(data) + Lap(scale)`` for Monte Carlo checks."""
    def run(data, rng, size):
        noise = mech.sample_laplace(scale, rng, size) if scale > 0 else np.zeros(size)
        return float(np.sum(data)) + noise
    return run


# ---------------------------------------------------------------------------
# sensitivity checks
# ---------------------------------------------------------------------------


@dataclass
class SensitivityCheck:
    name: str
    claimed: float
    observed: float
    n_pairs: int
    domain: str

    @property
    def bounded(self):
        return self.observed <= self.claimed * (1.0 + RATIO_RTOL)

    @property
    def attained(self):
        return abs(self.observed - self.claimed) <= RATIO_RTOL * self.claimed

    def to_dict(self):
        d = asdict(self)
        d.update(bounded=self.bounded, attained=self.attained, status=PASS if self.bounded else FAIL)
        return d


def check_relevance_sensitivity(d, n, levels=(-1.0, 0.0, 1.0), max_pairs=MAX_PAIRS):
    res = bruteforce_sensitivity(relevance_statistic, grid_points(levels, d), n, max_pairs)
    return SensitivityCheck("relevance", mech.relevance_sensitivity(d, n), res.value, res.n_pairs,
                            f"R in {list(levels)}^{d}, |D|={n}")


def check_h0_sensitivity(d, h0_units, n, levels=None, max_pairs=MAX_PAIRS):
    levels = levels if levels is not None else (0.0, 1.0 / math.sqrt(d))
    res = bruteforce_sensitivity(h0_statistic(h0_units), grid_points(levels, d), n, max_pairs)
    return SensitivityCheck("first-layer", mech.h0_sensitivity(h0_units, d), res.value, res.n_pairs,
                            f"x in {[round(v, 6) for v in levels]}^{d}, |h0|={h0_units}, |L|={n}")


def check_loss_sensitivity(k, n_classes, n, levels=(0.0, 1.0), max_pairs=MAX_PAIRS):
    res = bruteforce_sensitivity(loss_statistic(n_classes), loss_grid(levels, k, n_classes), n, max_pairs)
    return SensitivityCheck("loss-coefficients", mech.loss_sensitivity(n_classes, k), res.value, res.n_pairs,
                            f"h in {list(levels)}^{k}, one-hot y, M={n_classes}, |L|={n}")


def extremal_pair(sensitivity, size):
    """Two statistic values whose L1 distance equals ``sensitivity`` exactly,
    spread evenly over ``size`` coordinates."""
    return np.zeros(size), np.full(size, sensitivity / size)


def stage_checks(budget, d, h0_units, top_units, n_classes, n_records, batch_size, allocation=None,
                 scale_factor=1.0):
    """Analytic ratio checks for the three perturbation stages.

    Each stage is checked on a pair of statistics at the claimed sensitivity.
    ``scale_factor`` multiplies every noise scale (0.5 reproduces the
    under-scaled mutation).
    """
    sens = mech.Sensitivities.compute(d, n_records, h0_units, top_units, n_classes)
    alloc = allocation or mech.BudgetAllocation.uniform(d, budget.eps2)
    reports = []
    # relevance release: d coordinates at scale Delta_R / eps1
    a, b = extremal_pair(sens.relevance, d)
    reports.append(analytic_ratio_check(a, b, scale_factor * sens.relevance / budget.eps1, budget.eps1,
                                        name="relevance"))
    # first layer: per-(unit, feature) batch sums at scale Delta_h0 / eps_j; each
    # coordinate moves by the per-coordinate share Delta_h0 / (|h0| d) of the bound
    per = sens.h0 / (h0_units * d)
    a = np.zeros(h0_units * d)
    scales = np.tile(sens.h0 / alloc.budgets, h0_units) * scale_factor
    reports.append(analytic_ratio_check(a, a + per, scales, budget.eps2, name="first-layer"))
    # loss coefficients: 3M batch sums at scale Delta_F / eps3
    a, b = extremal_pair(sens.loss, 3 * n_classes)
    reports.append(analytic_ratio_check(a, b, scale_factor * sens.loss / budget.eps3, budget.eps3,
                                        name="loss-coefficients"))
    return reports


def per_record_checks(budget, d, h0_units, top_units, n_classes, batch_size, allocation=None):
    """Ratio checks for the per-example releases the trainer actually makes.

    Feature noise ``(1/|L|) Lap(Delta_h0 / eps_j)`` on a record moving from 0 to
    ``1/sqrt(d)`` in every feature, and coefficient noise
    ``(1/|L|) Lap(Delta_F / eps3)`` on a record whose label changes class.
    """
    sens = mech.Sensitivities.compute(d, 1, h0_units, top_units, n_classes)
    alloc = allocation or mech.BudgetAllocation.uniform(d, budget.eps2)
    x_scale = mech.feature_noise_scales(alloc, sens.h0, batch_size)
    feat = analytic_ratio_check(np.zeros(d), np.full(d, 1.0 / math.sqrt(d)), x_scale, budget.eps2,
                                name="per-record-features")
    y1, y2 = np.eye(n_classes)[0], np.eye(n_classes)[1 % n_classes]
    c_scale = sens.loss / (batch_size * budget.eps3)
    coef = analytic_ratio_check(0.5 - y1, 0.5 - y2, c_scale, budget.eps3, name="per-record-coefficients")
    return [feat, coef]


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    checks: list
    tightness: dict
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c["status"] == PASS for c in self.checks)

    def to_dict(self):
        return {"passed": self.passed, "checks": self.checks, "tightness": self.tightness, "notes": self.notes}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_audit(epsilon=1.0, split=(1.0, 1.0, 1.0), batch_size=600, d=784, h0_units=64, top_units=25,
              n_classes=10, n_records=8000, seed=0, mc_trials=100_000):
    """Every sensitivity, ratio and mutation check, at toy scale and at the
    configured dimensions. Tightness of each brute-forced bound is reported
    separately and does not affect ``passed``."""
    budget = mech.PrivacyBudget.split(epsilon, split)
    checks, tightness = [], {}

    sens = [check_relevance_sensitivity(2, 3), check_relevance_sensitivity(3, 3),
            check_h0_sensitivity(2, 2, 3), check_h0_sensitivity(2, 2, 3, levels=(0.0, 0.5, 1.0)),
            check_loss_sensitivity(2, 2, 3), check_loss_sensitivity(3, 3, 2)]
    for s in sens:
        checks.append(dict(s.to_dict(), check=f"sensitivity/{s.name}"))
        tightness[s.name] = tightness.get(s.name, False) or s.attained

    for scale_factor, tag in ((1.0, "configured"), (0.5, "halved")):
        for r in stage_checks(budget, d, h0_units, top_units, n_classes, n_records, batch_size,
                              scale_factor=scale_factor):
            entry = dict(r.to_dict(), check=f"ratio/{r.mechanism}/{tag}")
            if tag == "halved":
                entry["mutation_detected"] = r.status == FAIL
                entry["status"] = PASS if r.status == FAIL else FAIL
            checks.append(entry)
    for r in per_record_checks(budget, d, h0_units, top_units, n_classes, batch_size):
        checks.append(dict(r.to_dict(), check=f"ratio/{r.mechanism}"))

    pair = NeighborPair(np.zeros((2, 1)), np.array([[0.0], [1.0]]))
    mc = monte_carlo_ratio(laplace_output(1.0 / epsilon), pair, epsilon, mc_trials, seed=seed, name="scalar-laplace")
    checks.append(dict(mc.to_dict(), check="monte-carlo/scalar-laplace"))
    broken = monte_carlo_ratio(laplace_output(0.0), pair, epsilon, mc_trials, seed=seed, name="no-noise")
    entry = dict(broken.to_dict(), check="monte-carlo/no-noise")
    entry["status"] = PASS if broken.status in (FAIL, INCONCLUSIVE) else FAIL
    checks.append(entry)

    notes = ["sensitivity checks enumerate discretized toy domains; they are evidence, not proof",
             "status of 'halved' and 'no-noise' entries is PASS when the broken mechanism is caught"]
    return AuditReport(checks, tightness, notes)
