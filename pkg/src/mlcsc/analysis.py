"""Stability bounds, isometry certifiers, and recovery metrics.

The bound evaluators come in two levels.  The ``*_value(s)`` functions
are pure formula evaluations in the quantities that enter each bound
(coherences, caps, noise levels); the ``bound_*`` functions wrap them
for a concrete model, measuring the needed mutual coherences from the
dictionaries (overridable, for scenario tables) and refusing — value
``None``, flag false — whenever a hypothesis fails.  Units per report:
the global squared-l2 bounds, and one patch-wise l2,inf bound (reported
unsquared, matching its worked examples).

Also here: empirical stripe-restricted-isometry estimation with an
exact per-support eigenvalue oracle for small instances, the one-sided
local near-isometry check (patch energy of the product vs stripe energy
of the coefficients), and the no-cancellation support check.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dictionaries import single_layer_dict
from .errors import ConfigError, DimensionError
from .model import support_metrics, stack_metrics  # re-exported  # noqa: F401
from .vectors import (
    SparseVec,
    l0,
    l0_inf_window,
    l2_inf_patch,
    l2_inf_window,
    stripe_width,
)

_FP_SLACK = 1e-9


# ----------------------------------------------------------------------
# formula layer


def coherence_threshold(mu):
    """The classical uniqueness/success edge (1/2)(1 + 1/mu)."""
    return math.inf if mu == 0 else 0.5 * (1.0 + 1.0 / mu)


def thm4_value(mu, lam, e0):
    """4 e0^2 / (1 - (2 lam - 1) mu); requires lam < (1/2)(1 + 1/mu)."""
    return 4.0 * e0 * e0 / (1.0 - (2.0 * lam - 1.0) * mu)


def thm4_hypothesis(mu, lam):
    return lam < coherence_threshold(mu)


def thm4_alt_values(mu_eff_last, layer_mus, lams, e0):
    """Last-layer error inflated layer by layer on the way up.

    Returns (values, relaxed, relaxed_valid): values[i-1] is
    E_L^2 * prod_{j>i} (1 + (2 lam_j - 1) mu(D_j)); relaxed[i-1] is the
    blunt E_L^2 * 2^(L-i), valid when every inflation factor <= 2.
    """
    depth = len(lams)
    if len(layer_mus) != depth:
        raise DimensionError("one layer coherence per cap required")
    e_last_sq = thm4_value(mu_eff_last, lams[-1], e0)
    values, relaxed, relaxed_valid = [], [], []
    for i in range(1, depth + 1):
        factors = [
            1.0 + (2.0 * lams[j - 1] - 1.0) * layer_mus[j - 1]
            for j in range(i + 1, depth + 1)
        ]
        values.append(e_last_sq * math.prod(factors))
        relaxed.append(e_last_sq * 2.0 ** (depth - i))
        relaxed_valid.append(all(f <= 2.0 for f in factors))
    return values, relaxed, relaxed_valid


def thm6_layer_factor(n_prev, n_cur):
    """sqrt(3 c / 2) with c = ceil((2 n_prev - 1) / n_cur)."""
    c = -((2 * n_prev - 1) // -n_cur)
    return math.sqrt(1.5 * c)


def thm6_values(eps0, nnz_patch_last, ns):
    """Patch-wise l2,inf error per layer, deepest first multiplied up.

    eps_L = (15/2) eps0 sqrt(nnz_patch_last); crossing from layer j to
    j-1 multiplies by sqrt(3 c_j / 2).  ``ns`` are the per-layer filter
    lengths n_1..n_L.  Returns (values, eps_last, zeta_last) where
    zeta_last = 4 eps0 is the matching threshold level.
    """
    depth = len(ns)
    eps_last = 7.5 * eps0 * math.sqrt(nnz_patch_last)
    values = []
    for i in range(1, depth + 1):
        factor = math.prod(
            thm6_layer_factor(ns[j - 2], ns[j - 1])
            for j in range(i + 1, depth + 1)
        )
        values.append(eps_last * factor)
    return values, eps_last, 4.0 * eps0


def thm6_hypothesis(mu_eff_last, lam_last):
    threshold = math.inf if mu_eff_last == 0 else (1.0 + 1.0 / mu_eff_last) / 3.0
    return lam_last <= threshold


def thm7_values(mu_eff_last, lam_last, e0, depth):
    """e0^2 / (1 - mu (lam_L - 1)) * (3/2)^(L-i) per layer."""
    base = e0 * e0 / (1.0 - mu_eff_last * (lam_last - 1.0))
    return [base * 1.5 ** (depth - i) for i in range(1, depth + 1)]


def eq13_margin(mu_eff_last, lam_last, eps0, gamma_min):
    """Signed slack in the deepest-cap hypothesis; certified when > 0.

    (1/2)(1 + 1/mu) - (1/mu)(eps0 / |gamma_min|) - lam_L.  A zero noise
    level reduces it to the classical threshold margin.
    """
    if mu_eff_last == 0:
        return math.inf
    if gamma_min == 0:
        return -math.inf
    return (
        0.5 * (1.0 + 1.0 / mu_eff_last)
        - (eps0 / abs(gamma_min)) / mu_eff_last
        - lam_last
    )


def dcp_layered_values(layer_mus, lams, e0):
    """Cumulative layered bound: 4 e0^2 4^(i-1) prod_{j<=i} 1/(1 - (2 lam_j - 1) mu_j)."""
    if len(layer_mus) != len(lams):
        raise DimensionError("one layer coherence per cap required")
    values = []
    acc = 1.0
    for i in range(1, len(lams) + 1):
        acc /= 1.0 - (2.0 * lams[i - 1] - 1.0) * layer_mus[i - 1]
        values.append(4.0 * e0 * e0 * 4.0 ** (i - 1) * acc)
    return values


# ----------------------------------------------------------------------
# model-level reports


@dataclass(frozen=True)
class LayerBound:
    layer: int
    value: float  # None when the hypothesis fails
    hypothesis_ok: bool
    quantities: dict


@dataclass(frozen=True)
class BoundReport:
    name: str
    units: str
    per_layer: tuple
    extras: dict

    def values(self):
        return tuple(b.value for b in self.per_layer)


def _effective_mus(model):
    return [model.effective(i).mutual_coherence() for i in range(1, model.depth + 1)]


def _layer_mus(model):
    return [
        single_layer_dict(model.layers[i - 1], model.rep_geom(i - 1)).mutual_coherence()
        for i in range(1, model.depth + 1)
    ]


def _caps(model, lambdas):
    lams = tuple(model.lambdas if lambdas is None else lambdas)
    if len(lams) != model.depth:
        raise DimensionError("one cap per layer required")
    return lams


def bound_thm4(model, lambdas=None, E0=1.0, mus=None):
    """Depth-independent per-layer recovery bound from effective-dictionary
    coherences.  ``mus`` overrides the measured mu(D^(i)) values."""
    lams = _caps(model, lambdas)
    mus = _effective_mus(model) if mus is None else list(mus)
    per = []
    for i in range(1, model.depth + 1):
        mu, lam = mus[i - 1], lams[i - 1]
        ok = thm4_hypothesis(mu, lam)
        per.append(LayerBound(
            i, thm4_value(mu, lam, E0) if ok else None, ok,
            {"mu_eff": mu, "lambda": lam, "E0": E0},
        ))
    return BoundReport("thm4", "squared l2", tuple(per), {})


def bound_thm4_alt(model, lambdas=None, E0=1.0, mu_eff_last=None, layer_mus=None):
    """Last-layer bound pushed up the chain with per-layer inflation
    factors, plus the blunt doubling form."""
    lams = _caps(model, lambdas)
    if mu_eff_last is None:
        mu_eff_last = model.effective(model.depth).mutual_coherence()
    lmus = _layer_mus(model) if layer_mus is None else list(layer_mus)
    ok_last = thm4_hypothesis(mu_eff_last, lams[-1])
    values, relaxed, relaxed_valid = thm4_alt_values(mu_eff_last, lmus, lams, E0)
    per = tuple(
        LayerBound(
            i, values[i - 1] if ok_last else None, ok_last,
            {"mu_eff_last": mu_eff_last, "mu_layer": lmus[i - 1], "lambda": lams[i - 1]},
        )
        for i in range(1, model.depth + 1)
    )
    extras = {
        "relaxed": tuple(relaxed) if ok_last else None,
        "relaxed_valid": tuple(relaxed_valid),
    }
    return BoundReport("thm4_alt", "squared l2", per, extras)


def bound_thm6(model, lambdas=None, eps0=0.0, nnz_patch_last=1, mu_eff_last=None):
    """Patch-wise l2,inf error bound for the thresholded-lasso chain.

    Reported unsquared.  The crossing coefficients use the filter
    lengths as declared, pre-stride.
    """
    lams = _caps(model, lambdas)
    if mu_eff_last is None:
        mu_eff_last = model.effective(model.depth).mutual_coherence()
    ok = thm6_hypothesis(mu_eff_last, lams[-1])
    ns = [layer.n for layer in model.layers]
    values, eps_last, zeta_last = thm6_values(eps0, nnz_patch_last, ns)
    per = tuple(
        LayerBound(
            i, values[i - 1] if ok else None, ok,
            {"mu_eff_last": mu_eff_last, "lambda_last": lams[-1], "eps0": eps0},
        )
        for i in range(1, model.depth + 1)
    )
    return BoundReport(
        "thm6", "patch-wise l2,inf", per,
        {"eps_last": eps_last, "zeta_last": zeta_last},
    )


def bound_thm7(model, lambdas=None, E0=1.0, gamma_min=1.0, eps0=None, mu_eff_last=None):
    """Projection-recovery bound with the signed deepest-cap margin.

    ``eps0`` (patch-wise noise level) defaults to ``E0`` — conservative,
    since a patch never carries more energy than the whole vector.
    """
    lams = _caps(model, lambdas)
    if mu_eff_last is None:
        mu_eff_last = model.effective(model.depth).mutual_coherence()
    if eps0 is None:
        eps0 = E0
    margin = eq13_margin(mu_eff_last, lams[-1], eps0, gamma_min)
    denom_ok = mu_eff_last * (lams[-1] - 1.0) < 1.0
    ok = denom_ok and margin >= 0
    values = thm7_values(mu_eff_last, lams[-1], E0, model.depth) if denom_ok else None
    per = tuple(
        LayerBound(
            i, values[i - 1] if ok else None, ok,
            {"mu_eff_last": mu_eff_last, "lambda_last": lams[-1],
             "E0": E0, "gamma_min": gamma_min},
        )
        for i in range(1, model.depth + 1)
    )
    return BoundReport("thm7", "squared l2", per, {"margin": margin, "eps0": eps0})


def bound_dcp_layered(model, lambdas=None, E0=1.0, layer_mus=None):
    """Cumulative stage-wise bound, for contrast with the flat ones."""
    lams = _caps(model, lambdas)
    lmus = _layer_mus(model) if layer_mus is None else list(layer_mus)
    values = dcp_layered_values(lmus, lams, E0)
    per = []
    for i in range(1, model.depth + 1):
        ok = all(thm4_hypothesis(lmus[j - 1], lams[j - 1]) for j in range(1, i + 1))
        per.append(LayerBound(
            i, values[i - 1] if ok else None, ok,
            {"mu_layers": tuple(lmus[:i]), "lambdas": tuple(lams[:i])},
        ))
    return BoundReport("dcp_layered", "squared l2", tuple(per), {})


def coherence_report(model):
    """Per-layer and per-level coherences with their success thresholds."""
    layer_mu = tuple(_layer_mus(model))
    eff_mu = tuple(_effective_mus(model))
    return CoherenceReport(
        layer_mu=layer_mu,
        effective_mu=eff_mu,
        layer_threshold=tuple(coherence_threshold(m) for m in layer_mu),
        effective_threshold=tuple(coherence_threshold(m) for m in eff_mu),
    )


@dataclass(frozen=True)
class CoherenceReport:
    layer_mu: tuple
    effective_mu: tuple
    layer_threshold: tuple
    effective_threshold: tuple


# ----------------------------------------------------------------------
# stripe-sparse sampling and isometry checks


def rep_stripe_width(D):
    """Stripe window width on D's representation axis."""
    return stripe_width(D.support_len(), D.stride_product())


def sample_stripe_support(rng, geom, width, cap, nnz, tries=200):
    """A uniform support of the given size whose stripe count stays
    within ``cap``, or None when rejection keeps failing."""
    ones = np.ones(nnz)
    for _ in range(tries):
        idx = np.sort(rng.choice(geom.size, size=nnz, replace=False))
        if l0_inf_window(SparseVec(geom, idx, ones), width) <= cap:
            return idx
    return None


def sample_stripe_sparse(rng, geom, width, cap, nnz=None, unit=False):
    """Random stripe-cap-feasible vector with Gaussian coefficients."""
    if nnz is None:
        per_window = max(1, geom.spatial_len // max(width, 1))
        nnz = int(rng.integers(1, min(geom.size, max(1, cap * per_window)) + 1))
    idx = sample_stripe_support(rng, geom, width, cap, nnz)
    while idx is None and nnz > 1:
        nnz -= 1
        idx = sample_stripe_support(rng, geom, width, cap, nnz)
    if idx is None:
        raise ConfigError("could not sample a cap-feasible support")
    vals = rng.standard_normal(len(idx))
    if unit:
        vals /= np.linalg.norm(vals)
    return SparseVec(geom, idx, vals)


def support_delta(D, indices):
    """Exact restricted-isometry constant of one support: the worst
    eigenvalue deviation of the restricted Gram from identity."""
    cols = D.columns(np.asarray(indices, dtype=np.int64))
    gram = cols.T @ cols
    eigs = np.linalg.eigvalsh(gram)
    return float(max(eigs[-1] - 1.0, 1.0 - eigs[0]))


@dataclass(frozen=True)
class StripeRipEstimate:
    delta_hat: float
    coherence_bound: float
    trials: int


def estimate_stripe_rip(D, k, trials, rng, coherence_bound=True):
    """Empirical lower bound on the stripe-restricted-isometry constant:
    the largest |  ||D g||^2 - 1 | over sampled unit stripe-sparse g."""
    geom = D.rep_geom(D.depth)
    width = rep_stripe_width(D)
    worst = 0.0
    for _ in range(trials):
        gamma = sample_stripe_sparse(rng, geom, width, k, unit=True)
        out = D.apply(gamma).data
        worst = max(worst, abs(float(out @ out) - 1.0))
    bound = (k - 1) * D.mutual_coherence() if coherence_bound else math.nan
    return StripeRipEstimate(worst, bound, trials)


def exact_stripe_delta(D, k, max_size=14):
    """Exhaustive stripe-RIP constant for tiny dictionaries: the max of
    support_delta over every support with stripe count <= k."""
    geom = D.rep_geom(D.depth)
    if geom.size > max_size:
        raise ConfigError(
            f"exhaustive enumeration capped at {max_size} columns, got {geom.size}"
        )
    width = rep_stripe_width(D)
    worst = 0.0
    for size in range(1, geom.size + 1):
        for combo in itertools.combinations(range(geom.size), size):
            idx = np.asarray(combo, dtype=np.int64)
            marker = SparseVec(geom, idx, np.ones(size))
            if l0_inf_window(marker, width) > k:
                continue
            worst = max(worst, support_delta(D, idx))
    return worst


@dataclass(frozen=True)
class LocalIsometryCheck:
    trials: int
    violations: int
    worst_slack: float


def check_local_isometry(D, k, trials, rng, exact=True):
    """One-sided local near-isometry: patch energy of D g is at most
    (1 + delta) times the stripe energy of g.  ``exact`` uses the
    per-support eigenvalue delta; otherwise the coherence bound
    (k-1) mu.  Returns the violation count (expected zero) and the
    worst right-minus-left slack seen.
    """
    geom = D.rep_geom(D.depth)
    width = rep_stripe_width(D)
    patch = D.support_len()
    mu = None if exact else D.mutual_coherence()
    violations = 0
    worst = math.inf
    for _ in range(trials):
        gamma = sample_stripe_sparse(rng, geom, width, k)
        delta = support_delta(D, gamma.idx) if exact else (k - 1) * mu
        lhs = l2_inf_patch(D.apply(gamma), patch) ** 2
        rhs = (1.0 + delta) * l2_inf_window(gamma, width) ** 2
        if lhs > rhs + _FP_SLACK * max(1.0, rhs):
            violations += 1
        worst = min(worst, rhs - lhs)
    return LocalIsometryCheck(trials, violations, worst)


def check_nvs(layer, gamma):
    """True when the atom combination cancels nowhere: the product's
    nonzero count equals the nonzero-row count of the selected atoms."""
    product = layer.apply(gamma)
    rows = layer.nonzero_row_count(product.geom.spatial_len, gamma.idx)
    return l0(product) == rows
