"""Sparse pursuit engines: OMP, subspace pursuit, FISTA, IHT.

All four solvers work against either a plain dense matrix or an
:class:`~mlcsc.dictionaries.EffectiveDict` (a bare ConvLayer is bound to
a geometry with :func:`~mlcsc.dictionaries.single_layer_dict` first).
They are deterministic: no randomness anywhere, argmax ties broken
toward the lowest flat index, and the power-iteration step-size estimate
starts from a fixed vector.

The greedy solvers support an optional stripe-sparsity budget
(``l0inf_cap`` with its window width ``l0inf_width``): a candidate atom
whose acceptance would push the max windowed nonzero count past the cap
stops the pursuit before the violation (or is skipped and the search
continues, behind the off-by-default ``skip_on_violation`` flag).
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .dictionaries import EffectiveDict
from .errors import ConfigError, DimensionError
from .vectors import (
    DenseVec,
    Geometry,
    SparseVec,
    hard_threshold_array,
    l0_inf_window,
    soft_threshold_array,
)

# supports larger than this refit via conjugate gradients on the normal
# equations instead of a dense Cholesky factorization
CHOLESKY_SUPPORT_LIMIT = 200
CG_TOL = 1e-10

# power iteration under-estimates ||D||^2; the IHT step divides by the
# estimate inflated by this factor so monotone descent survives the gap
IHT_STEP_SAFETY = 1.05


@dataclass(frozen=True)
class PursuitConfig:
    """Solver knobs shared by the pursuit family.

    ``k`` is the target cardinality (OMP stop / SP size / IHT budget);
    ``lambda_l1`` the lasso weight; ``tol`` is interpreted per solver
    (residual norm relative to ||y|| for the greedy solvers, relative
    objective change for FISTA/IHT).  ``step_size`` overrides the
    power-iteration default for the gradient solvers.
    """

    k: int = None
    lambda_l1: float = None
    max_iters: int = None
    tol: float = None
    step_size: float = None
    l0inf_cap: int = None
    l0inf_width: int = None
    skip_on_violation: bool = False
    init_support: np.ndarray = None
    x0: np.ndarray = None
    power_iters: int = 50


@dataclass(frozen=True)
class PursuitResult:
    coeffs: SparseVec
    iters: int
    residual_norm: float
    stop_reason: str
    objective: float = None
    restarts: int = 0


class _Operator:
    """Uniform dense-matrix / effective-dictionary adapter."""

    def __init__(self, D):
        if isinstance(D, EffectiveDict):
            self._eff = D
            self.shape = D.shape
            self.out_geom = D.out_geom
        elif isinstance(D, np.ndarray):
            if D.ndim != 2:
                raise DimensionError("dictionary matrix must be 2-D")
            self._mat = np.ascontiguousarray(D, dtype=np.float64)
            self._eff = None
            self.shape = D.shape
            self.out_geom = Geometry(D.shape[1], 1)
        else:
            raise TypeError(
                "dictionary must be an EffectiveDict or a dense ndarray "
                f"(got {type(D).__name__}); bind a ConvLayer to a geometry "
                "with single_layer_dict() first"
            )
        self._lip = None

    def apply(self, arr):
        if self._eff is not None:
            return self._eff.apply_array(arr)
        return self._mat @ arr

    def adjoint(self, arr):
        if self._eff is not None:
            return self._eff.adjoint_array(arr)
        return self._mat.T @ arr

    def columns(self, idx):
        if self._eff is not None:
            return self._eff.columns(idx)
        return self._mat[:, np.asarray(idx, dtype=np.int64)]

    def lipschitz(self, iters=50):
        if self._lip is None:
            if self._eff is not None:
                self._lip = self._eff.lipschitz(iters)
            else:
                self._lip = array_lipschitz(self._mat, iters)
        return self._lip


def array_lipschitz(A, iters=50):
    """Power-iteration estimate of ||A||^2 (top eigenvalue of A^T A).

    The start vector is a fixed-seed Gaussian draw: deterministic, but
    never structurally orthogonal to the leading eigenvector the way an
    all-ones start is for shift-invariant Grams (where the iteration
    would stall in an invariant subspace forever).
    """
    v = np.random.default_rng(7).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        lam = float(np.linalg.norm(w))
        if lam <= 0.0:
            return 0.0
        v = w / lam
    return lam


def _signal_array(y, op):
    if isinstance(y, (DenseVec, SparseVec)):
        data = y.to_dense().data if isinstance(y, SparseVec) else y.data
    else:
        data = np.asarray(y, dtype=np.float64).ravel()
    if data.size != op.shape[0]:
        raise DimensionError(
            f"signal has {data.size} entries, dictionary rows are {op.shape[0]}"
        )
    return data


def _result_vec(op, idx, coef):
    return SparseVec(op.out_geom, np.asarray(idx, dtype=np.int64), coef)


def _ls_refit(cols, y):
    """min_a ||y - cols @ a||: Cholesky on the Gram for small supports,
    CG on the normal equations beyond CHOLESKY_SUPPORT_LIMIT."""
    k = cols.shape[1]
    if k == 0:
        return np.empty(0)
    if k <= CHOLESKY_SUPPORT_LIMIT:
        gram = cols.T @ cols
        rhs = cols.T @ y
        try:
            c, low = scipy.linalg.cho_factor(gram)
            return scipy.linalg.cho_solve((c, low), rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(cols, y, rcond=None)[0]
    gram_op = scipy.sparse.linalg.LinearOperator(
        (k, k), matvec=lambda a: cols.T @ (cols @ a)
    )
    rhs = cols.T @ y
    sol, _ = scipy.sparse.linalg.cg(gram_op, rhs, rtol=CG_TOL, maxiter=10 * k)
    return sol


def _cap_counter(op, config):
    """Returns f(support_indices) -> max windowed count, or None."""
    if config.l0inf_cap is None:
        return None
    if config.l0inf_width is None:
        raise ConfigError("l0inf_cap needs l0inf_width (the stripe window width)")
    geom = op.out_geom
    width = int(config.l0inf_width)

    def count(indices):
        if len(indices) == 0:
            return 0
        marker = SparseVec(geom, np.asarray(indices, dtype=np.int64),
                          np.ones(len(indices)))
        return l0_inf_window(marker, width)

    return count


def omp(y, D, config=PursuitConfig()):
    """Orthogonal matching pursuit with exact LS refits.

    Greedily adds the atom best correlated with the residual (ties to the
    lowest flat index), refits all coefficients by least squares, and
    stops on: target cardinality ``k``, residual norm below
    ``tol * ||y||``, stripe-cap boundary, or no admissible candidate.
    ``init_support`` warm-starts from a previous support.
    """
    op = D if isinstance(D, _Operator) else _Operator(D)
    y_arr = _signal_array(y, op)
    y_norm = float(np.linalg.norm(y_arr))
    tol = 1e-9 if config.tol is None else config.tol
    res_stop = tol * max(y_norm, 1.0)
    cap_count = _cap_counter(op, config)
    max_iters = config.max_iters if config.max_iters is not None else min(op.shape)

    support = []
    cols = np.empty((op.shape[0], 0))
    if config.init_support is not None and len(config.init_support) > 0:
        support = [int(i) for i in config.init_support]
        if len(set(support)) != len(support):
            raise ConfigError("init_support has duplicate indices")
        cols = op.columns(support)
        if cap_count is not None and cap_count(support) > config.l0inf_cap:
            raise ConfigError("init_support already violates the stripe cap")

    coef = _ls_refit(cols, y_arr)
    r = y_arr - cols @ coef if support else y_arr.copy()
    stop_reason = "max_iters"
    forbidden = set()
    iters = 0

    while True:
        if config.k is not None and len(support) >= config.k:
            stop_reason = "k_reached"
            break
        if np.linalg.norm(r) <= res_stop:
            stop_reason = "residual_tol"
            break
        if iters >= max_iters or len(support) >= op.shape[1]:
            stop_reason = "max_iters" if len(support) < op.shape[1] else "exhausted"
            break
        corr = np.abs(op.adjoint(r))
        if support:
            corr[np.array(support)] = -1.0
        if forbidden:
            corr[np.array(sorted(forbidden))] = -1.0
        best = int(np.argmax(corr))
        if corr[best] <= 1e-13 * max(y_norm, 1.0):
            stop_reason = "no_candidate"
            break
        if cap_count is not None and cap_count(support + [best]) > config.l0inf_cap:
            if config.skip_on_violation:
                forbidden.add(best)
                continue
            stop_reason = "cap"
            break
        support.append(best)
        cols = np.concatenate([cols, op.columns([best])], axis=1)
        coef = _ls_refit(cols, y_arr)
        r = y_arr - cols @ coef
        iters += 1

    res = float(np.linalg.norm(r))
    return PursuitResult(_result_vec(op, support, coef), iters, res, stop_reason)


def subspace_pursuit(y, D, config):
    """Subspace pursuit at fixed cardinality ``k``.

    Each round merges the current support with the k best residual
    correlations, refits, prunes back to the k largest coefficients, and
    refits again; stops when the residual no longer improves.  Returns
    the best iterate seen.  A stripe-cap violation on a pruned support
    stops with the last feasible iterate.
    """
    op = D if isinstance(D, _Operator) else _Operator(D)
    y_arr = _signal_array(y, op)
    if config.k is None or config.k < 1:
        raise ConfigError("subspace pursuit needs a positive cardinality k")
    k = int(config.k)
    if k > op.shape[1]:
        raise ConfigError(f"k={k} exceeds the {op.shape[1]} available atoms")
    cap_count = _cap_counter(op, config)
    max_iters = config.max_iters if config.max_iters is not None else 30
    tol = 1e-9 if config.tol is None else config.tol
    y_norm = float(np.linalg.norm(y_arr))

    def top_k(values, count):
        _, keep = hard_threshold_array(values, count)
        return keep

    support = np.sort(top_k(op.adjoint(y_arr), k))
    cols = op.columns(support)
    coef = _ls_refit(cols, y_arr)
    r = y_arr - cols @ coef
    best = (float(np.linalg.norm(r)), support, coef)
    stop_reason = "stalled"

    if cap_count is not None and cap_count(support) > config.l0inf_cap:
        empty = _result_vec(op, [], [])
        return PursuitResult(empty, 0, y_norm, "cap")

    iters = 0
    for iters in range(1, max_iters + 1):
        merged = np.union1d(support, top_k(op.adjoint(r), k))
        cols_m = op.columns(merged)
        coef_m = _ls_refit(cols_m, y_arr)
        dense = np.zeros(op.shape[1])
        dense[merged] = coef_m
        support_new = np.sort(top_k(dense, k))
        if cap_count is not None and cap_count(support_new) > config.l0inf_cap:
            stop_reason = "cap"
            break
        cols = op.columns(support_new)
        coef = _ls_refit(cols, y_arr)
        r = y_arr - cols @ coef
        res = float(np.linalg.norm(r))
        if res < best[0] - 1e-15:
            best = (res, support_new, coef)
        else:
            stop_reason = "stalled"
            break
        support = support_new
        if res <= tol * max(y_norm, 1.0):
            stop_reason = "residual_tol"
            break

    res, support, coef = best
    return PursuitResult(_result_vec(op, support, coef), iters, res, stop_reason)


def _fista_core(apply_fn, adjoint_fn, Y, lam, step, max_iters, tol):
    """Monotone FISTA on F(X) = 0.5||Y - D X||_F^2 + lam * ||X||_1.

    Accelerated proximal gradient with adaptive restart: when the
    accelerated step increases the objective, the step is redone without
    momentum (plain ISTA majorization step, guaranteed non-increasing)
    and the momentum sequence restarts.  Returns the last prox iterate
    (never the extrapolated point).

    ``Y`` may be a (size,) vector or (size, batch) matrix; the objective
    is summed over columns.
    """
    X = np.zeros((adjoint_fn(Y)).shape)
    DX = np.zeros_like(Y)
    X_prev, DX_prev = X, DX
    t = 1.0
    F_cur = 0.5 * float(np.sum(Y * Y))
    restarts = 0
    iters = 0
    stop_reason = "max_iters"

    for iters in range(1, max_iters + 1):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        # D is linear, so D z is a combination of the cached D x terms
        Z = X + beta * (X - X_prev)
        DZ = DX + beta * (DX - DX_prev)
        G = adjoint_fn(DZ - Y)
        X_new = soft_threshold_array(Z - step * G, step * lam)
        DX_new = apply_fn(X_new)
        R = Y - DX_new
        F_new = 0.5 * float(np.sum(R * R)) + lam * float(np.sum(np.abs(X_new)))
        if F_new > F_cur:
            # restart: redo as a plain ISTA step from X (monotone by
            # majorization), drop the momentum
            restarts += 1
            G = adjoint_fn(DX - Y)
            X_new = soft_threshold_array(X - step * G, step * lam)
            DX_new = apply_fn(X_new)
            R = Y - DX_new
            F_new = 0.5 * float(np.sum(R * R)) + lam * float(np.sum(np.abs(X_new)))
            t_next = 1.0
        X_prev, DX_prev = X, DX
        X, DX = X_new, DX_new
        if abs(F_cur - F_new) <= tol * max(F_cur, 1e-300):
            F_cur = F_new
            stop_reason = "objective_tol"
            break
        F_cur = F_new
        t = t_next

    return X, F_cur, iters, restarts, stop_reason


def fista_lasso(y, D, config):
    """Lasso via monotone FISTA: min 0.5||y - D g||^2 + lambda_l1 ||g||_1.

    Default step is 1/L with L the power-iteration estimate of ||D||^2.
    With ``lambda_l1 >= ||D^T y||_inf`` the zero vector is optimal and is
    returned (after one vanishing step).
    """
    op = D if isinstance(D, _Operator) else _Operator(D)
    y_arr = _signal_array(y, op)
    if config.lambda_l1 is None or config.lambda_l1 < 0:
        raise ConfigError("fista_lasso needs a nonnegative lambda_l1")
    lip = op.lipschitz(config.power_iters)
    step = config.step_size if config.step_size is not None else 1.0 / max(lip, 1e-30)
    max_iters = config.max_iters if config.max_iters is not None else 500
    tol = 1e-10 if config.tol is None else config.tol

    X, F, iters, restarts, stop_reason = _fista_core(
        op.apply, op.adjoint, y_arr, float(config.lambda_l1), step, max_iters, tol
    )
    res = float(np.linalg.norm(y_arr - op.apply(X)))
    coeffs = SparseVec.from_dense(DenseVec(op.out_geom, X))
    return PursuitResult(coeffs, iters, res, stop_reason, objective=F,
                         restarts=restarts)


def iht(y, D, config):
    """Iterative hard thresholding at cardinality ``k``.

    gamma <- H_k(gamma + step * D^T (y - D gamma)), ties at the k-th
    magnitude broken toward the lowest flat index.  The default step
    1/(1.05 * L_hat) sits strictly under the monotone-descent edge, so
    the squared residual never increases.  ``x0`` warm-starts.
    """
    op = D if isinstance(D, _Operator) else _Operator(D)
    y_arr = _signal_array(y, op)
    if config.k is None or config.k < 0:
        raise ConfigError("iht needs a nonnegative cardinality k")
    k = int(config.k)
    lip = op.lipschitz(config.power_iters)
    step = (config.step_size if config.step_size is not None
            else 1.0 / (IHT_STEP_SAFETY * max(lip, 1e-30)))
    max_iters = config.max_iters if config.max_iters is not None else 200
    tol = 1e-12 if config.tol is None else config.tol

    if config.x0 is not None:
        x = np.asarray(config.x0, dtype=np.float64).ravel().copy()
        if x.size != op.shape[1]:
            raise DimensionError("x0 length does not match the dictionary")
        x, _ = hard_threshold_array(x, k)
    else:
        x = np.zeros(op.shape[1])
    Dx = op.apply(x)
    stop_reason = "max_iters"
    iters = 0
    for iters in range(1, max_iters + 1):
        grad_step = x + step * op.adjoint(y_arr - Dx)
        x_new, _ = hard_threshold_array(grad_step, k)
        Dx_new = op.apply(x_new)
        if np.linalg.norm(x_new - x) <= tol * max(np.linalg.norm(x), 1e-30):
            x, Dx = x_new, Dx_new
            stop_reason = "fixed_point"
            break
        x, Dx = x_new, Dx_new
    res = float(np.linalg.norm(y_arr - Dx))
    coeffs = SparseVec.from_dense(DenseVec(op.out_geom, x))
    return PursuitResult(coeffs, iters, res, stop_reason)


CODERS = {
    "omp": omp,
    "sp": subspace_pursuit,
    "fista": fista_lasso,
    "iht": iht,
}


def run_coder(name, y, D, config):
    try:
        fn = CODERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown coder {name!r}; choose from {sorted(CODERS)}"
        ) from None
    return fn(y, D, config)
