"""Reproducible experiment drivers behind the CLI commands.

Randomness policy: every experiment takes one root seed, spawns one
child generator per trial through SeedSequence, and aggregates in trial
order — results are identical no matter how a worker pool schedules the
trials, and a rerun with the same seed reproduces them bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .analysis import eq13_margin, thm7_values
from .dictionaries import ConvLayer
from .errors import ConfigError
from .learning import ZetaPolicy, random_model
from .model import (
    MLCSCModel,
    layered_pursuit,
    ml_csc_pursuit,
    sample,
    support_metrics,
)
from .pursuit import PursuitConfig
from .vectors import DenseVec, Geometry, l2_inf_patch

IHT_STEP_SAFETY = 1.05


# ----------------------------------------------------------------------
# reference model builders


def synthetic_model(rng, n_signal=200, atoms=(250, 300, 350),
                    per_filter_nnz=3, lambdas=(90, 30, 10)):
    """The flat three-layer synthetic benchmark.

    One fully-decimated first layer (filter length = stride = signal
    length, so each representation lives at a single position and the
    stripe counts are plain nonzero counts), followed by 1x1 mixing
    layers whose filters carry only a few nonzero weights each.  The
    default caps are consistent by construction: k deepest nonzeros
    spread into at most 3k, then 9k, coordinates.
    """
    specs = [(atoms[0], n_signal, n_signal)]
    specs += [(m, 1, 1) for m in atoms[1:]]
    policies = tuple(
        ZetaPolicy("count", per_filter_nnz) for _ in atoms[1:]
    )
    return random_model(
        rng, Geometry(n_signal, 1), specs, lambdas, policies=policies
    )


def digit_model(rng, width=784, filters=(8, 32, 128), ns=(7, 5, 7),
                strides=(2, 2, 1), keep_fractions=(0.03, 0.01),
                lambdas=None):
    """The digit-scale architecture: a strided first layer and two
    sparse-kernel layers, on a flattened image treated as one circular
    axis.  Caps default to the layer sizes (inactive)."""
    specs = list(zip(filters, ns, strides))
    policies = tuple(ZetaPolicy("fraction", q) for q in keep_fractions)
    if lambdas is None:
        lambdas = tuple(width * m for m in filters)
    return random_model(
        rng, Geometry(width, 1), specs, lambdas, policies=policies
    )


def perturb_model(model, rng, scale=0.05, reproject=True):
    """Add Frobenius-relative Gaussian noise to every kernel, keeping
    each perturbed layer's nonzero pattern (so sparsity survives), and
    renormalize."""
    layers = []
    for layer in model.layers:
        kernels = layer.to_dense_kernels()
        noise = rng.standard_normal(kernels.shape)
        if reproject:
            noise = np.where(kernels != 0.0, noise, 0.0)
        nref = np.linalg.norm(noise)
        if nref > 0:
            noise *= scale * np.linalg.norm(kernels) / nref
        layers.append(ConvLayer.from_dense(kernels + noise, layer.stride).normalized())
    return MLCSCModel(tuple(layers), model.signal_geom, model.lambdas)


# ----------------------------------------------------------------------
# recovery comparison


RECOVERY_METHODS = ("projection-omp", "projection-sp", "layered-sp")


@dataclass(frozen=True)
class RecoveryRow:
    method: str
    k: int
    layer: int
    mean_intersection: float
    mean_l2_rel_err: float
    trials: int
    certified: int
    cert_support_ok: int
    cert_bound_ok: int


def _trial_metrics(model, y, stack, k):
    """Per-method stack estimates for one trial: the two effective-
    dictionary pursuits at the oracle deepest cardinality, and the
    stage-wise baseline at per-layer oracle cardinalities."""
    oracle = [g.nnz for g in stack.gammas]
    est = {}
    est["projection-omp"] = ml_csc_pursuit(
        y, model, "omp", PursuitConfig(k=k)
    ).stack.gammas
    est["projection-sp"] = ml_csc_pursuit(
        y, model, "sp", PursuitConfig(k=k)
    ).stack.gammas
    est["layered-sp"] = layered_pursuit(
        y, model, "sp", per_layer_k=[max(1, c) for c in oracle]
    ).gammas
    return est


def recovery_trial(model, k, noise_sigma, seed_seq, mu_eff_last):
    """One sampled signal coded by every method, with the per-trial
    deepest-cap certification check applied to each estimate."""
    rng = np.random.default_rng(seed_seq)
    y, stack = sample(model, rng, nnz=k, noise_sigma=noise_sigma)
    noise = y.data - stack.x.data
    e0 = float(np.linalg.norm(noise))
    patch = min(model.effective(model.depth).support_len(),
                model.signal_geom.spatial_len)
    eps0 = l2_inf_patch(DenseVec(model.signal_geom, noise), patch)
    gamma_min = float(np.min(np.abs(stack.deepest().val)))
    margin = eq13_margin(mu_eff_last, k, eps0, gamma_min)
    certified = margin > 0
    bounds = (
        thm7_values(mu_eff_last, k, e0, model.depth)
        if certified and mu_eff_last * (k - 1) < 1.0 else None
    )

    estimates = _trial_metrics(model, y, stack, k)
    out = {}
    for method, gammas in estimates.items():
        per_layer = []
        support_ok = bound_ok = certified
        for i, (truth, guess) in enumerate(zip(stack.gammas, gammas), start=1):
            inter, rel = _pair_metrics(truth, guess)
            per_layer.append((inter, rel))
            if certified:
                if not set(guess.idx.tolist()) <= set(truth.idx.tolist()):
                    support_ok = False
                diff = truth.to_dense().data - guess.to_dense().data
                if bounds is None or float(diff @ diff) > bounds[i - 1]:
                    bound_ok = False
        out[method] = (per_layer, certified, support_ok, bound_ok)
    return out


def _pair_metrics(truth, guess):
    m = support_metrics(truth, guess)
    return m.intersection, m.l2_rel_err


def recovery_experiment(model, k_values, trials, noise_sigma, seed, threads=1):
    """Sweep deepest-layer cardinalities; returns (rows, mu(D^(L))).

    Rows are one per (method, k, layer) with mean intersection and mean
    relative error over the trials, plus how many trials were certified
    by the deepest-cap margin and how many of those kept the predicted
    support containment and error bound.
    """
    if trials < 0:
        raise ConfigError("trials must be >= 0")
    mu = model.effective(model.depth).mutual_coherence()
    if trials == 0:
        return [], mu
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(k_values) * trials)
    tasks = [
        (k, children[ki * trials + t])
        for ki, k in enumerate(k_values)
        for t in range(trials)
    ]
    if threads > 1 and tasks:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                _recovery_task,
                [(model, k, noise_sigma, ss, mu) for k, ss in tasks],
                chunksize=max(1, len(tasks) // (4 * threads)),
            ))
    else:
        results = [
            recovery_trial(model, k, noise_sigma, ss, mu) for k, ss in tasks
        ]

    rows = []
    for ki, k in enumerate(k_values):
        block = results[ki * trials: (ki + 1) * trials]
        for method in RECOVERY_METHODS:
            for layer in range(1, model.depth + 1):
                inters = [r[method][0][layer - 1][0] for r in block]
                rels = [r[method][0][layer - 1][1] for r in block]
                cert = sum(r[method][1] for r in block)
                sup_ok = sum(r[method][1] and r[method][2] for r in block)
                bnd_ok = sum(r[method][1] and r[method][3] for r in block)
                rows.append(RecoveryRow(
                    method, k, layer,
                    float(np.mean(inters)) if block else float("nan"),
                    float(np.mean(rels)) if block else float("nan"),
                    len(block), cert, sup_ok, bnd_ok,
                ))
    return rows, mu


def _recovery_task(payload):
    return recovery_trial(*payload)


# ----------------------------------------------------------------------
# M-term approximation


@dataclass(frozen=True)
class MTermPoint:
    k: int
    mean_rel_err: float


def _hard_threshold_columns(X, k):
    if k <= 0:
        return np.zeros_like(X)
    if k >= X.shape[0]:
        return X
    idx = np.argpartition(np.abs(X), X.shape[0] - k, axis=0)[-k:, :]
    mask = np.zeros(X.shape, dtype=bool)
    mask[idx, np.arange(X.shape[1])[None, :]] = True
    return np.where(mask, X, 0.0)


def mterm_curve(model, signals, k_grid, iters=100):
    """Mean relative reconstruction error against the retained-coefficient
    budget, via batched hard-threshold descent on the effective
    dictionary.

    The grid is processed in ascending order and each budget warm-starts
    from the previous solution; the per-column objective then never
    increases across the grid, so the curve is non-increasing by
    construction.  k=0 maps to the zero reconstruction (error exactly 1).
    """
    eff = model.effective(model.depth)
    Y = np.ascontiguousarray(np.asarray(signals, dtype=np.float64).T)
    if Y.shape[0] != model.signal_geom.size:
        raise ConfigError("signals do not match the model geometry")
    norms = np.linalg.norm(Y, axis=0)
    safe = np.maximum(norms, 1e-300)
    step = 1.0 / (IHT_STEP_SAFETY * max(eff.lipschitz(), 1e-30))
    grid = sorted(set(int(k) for k in k_grid))
    if any(k < 0 for k in grid):
        raise ConfigError("coefficient budgets must be >= 0")

    X = np.zeros((eff.shape[1], Y.shape[1]))
    points = []
    for k in grid:
        if k == 0:
            points.append(MTermPoint(0, 1.0 if Y.shape[1] else float("nan")))
            continue
        X = _hard_threshold_columns(X, k)
        for _ in range(iters):
            X_new = _hard_threshold_columns(
                X + step * eff.adjoint_array(Y - eff.apply_array(X)), k
            )
            if np.array_equal(X_new, X):
                break
            X = X_new
        rel = np.linalg.norm(Y - eff.apply_array(X), axis=0) / safe
        points.append(MTermPoint(k, float(np.mean(rel)) if Y.shape[1] else float("nan")))
    return points
