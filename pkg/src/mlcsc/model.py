"""The layered sparse model: stacks, membership, sampling, pursuit.

A model is a chain of convolutional layers ``D_1 ... D_L`` over a signal
geometry, plus per-layer stripe-sparsity caps ``lambda_i``.  A signal
belongs to the model when there are representations ``gamma_i`` with

    x = D_1 gamma_1,   gamma_{i-1} = D_i gamma_i,
    max-stripe-nnz(gamma_i) <= lambda_i        for every layer,

where the stripe window width for ``gamma_i`` on its own (stride-
decimated) axis is ``ceil((2 n_i - 1)/s_i)`` — the influence zone of one
input-side patch — which is the familiar ``2n-1`` for stride 1 and the
whole axis in the fully decimated (non-convolutional) limit.

Two recovery strategies are provided on top of the pursuit engines:

* :func:`ml_csc_pursuit` — code the deepest layer against the effective
  dictionary, then read the intermediate representations off the chain;
* :func:`ml_csc_project` — sweep the deepest cap from 1 upward with a
  warm-started, stripe-capped OMP, keeping the last stack whose
  intermediate layers stay within their caps (always feasible, residual
  non-increasing over accepted sweeps);
* :func:`layered_pursuit` — the stage-wise baseline that codes each
  layer against the previous estimate (no feasibility guarantee).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .dictionaries import ConvLayer, EffectiveDict, single_layer_dict
from .errors import ConfigError, DimensionError, InfeasibleModelError
from .pursuit import PursuitConfig, PursuitResult, omp, run_coder
from .vectors import (
    DenseVec,
    Geometry,
    SparseVec,
    l0_inf_window,
    stripe_width,
)

CHAIN_REL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class MLCSCModel:
    """A layer chain with its geometry and per-layer sparsity caps."""

    layers: tuple
    signal_geom: Geometry
    lambdas: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        lambdas = tuple(int(l) for l in self.lambdas)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "lambdas", lambdas)
        if len(lambdas) != len(layers):
            raise DimensionError(
                f"{len(lambdas)} caps for {len(layers)} layers"
            )
        if any(l < 1 for l in lambdas):
            raise DimensionError("sparsity caps must be >= 1")
        # validates channel chaining, stride divisibility, filter widths
        self.effective(len(layers))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def effective(self, i):
        """EffectiveDict for layers 1..i (i >= 1)."""
        if not 1 <= i <= len(self.layers):
            raise DimensionError(f"layer index {i} outside 1..{len(self.layers)}")
        key = ("eff", i)
        if key not in self._cache:
            self._cache[key] = EffectiveDict(self.layers[:i], self.signal_geom)
        return self._cache[key]

    def rep_geom(self, i) -> Geometry:
        """Geometry of gamma_i (i=0 is the signal)."""
        return self.effective(self.depth).rep_geom(i)

    def layer_dict(self, i) -> EffectiveDict:
        """Layer i alone, bound to the geometry of gamma_{i-1}."""
        return single_layer_dict(self.layers[i - 1], self.rep_geom(i - 1))

    def stripe_widths(self):
        """Per-layer stripe window widths on each gamma_i's own axis."""
        return tuple(
            stripe_width(layer.n, layer.stride) for layer in self.layers
        )

    def normalized(self):
        return MLCSCModel(
            tuple(layer.normalized() for layer in self.layers),
            self.signal_geom,
            self.lambdas,
        )

    def is_unit_norm(self, tol=1e-10):
        return all(layer.is_unit_norm(tol) for layer in self.layers)

    # ------------------------------------------------------------------

    def stack_from_deepest(self, gamma_L):
        """Back-propagate gamma_L through the chain into a full stack."""
        if gamma_L.geom != self.rep_geom(self.depth):
            raise DimensionError(
                f"deepest code has geometry {gamma_L.geom}, model wants "
                f"{self.rep_geom(self.depth)}"
            )
        gammas = [gamma_L if isinstance(gamma_L, SparseVec)
                  else SparseVec.from_dense(gamma_L)]
        vec = gammas[0]
        for i in range(self.depth, 0, -1):
            vec = self.layers[i - 1].apply(vec)
            if i > 1:
                gammas.append(SparseVec.from_dense(vec))
        gammas.reverse()
        return LayerStack(x=vec, gammas=tuple(gammas))

    def zero_stack(self):
        gammas = tuple(
            SparseVec.empty(self.rep_geom(i)) for i in range(1, self.depth + 1)
        )
        return LayerStack(x=DenseVec.zeros(self.signal_geom), gammas=gammas)


@dataclass(frozen=True, eq=False)
class LayerStack:
    """A signal with its per-layer representations gamma_1..gamma_L."""

    x: DenseVec
    gammas: tuple

    @property
    def depth(self) -> int:
        return len(self.gammas)

    def deepest(self) -> SparseVec:
        return self.gammas[-1]


@dataclass(frozen=True)
class LayerMembership:
    layer: int
    cap: int
    stripe_nnz: int
    cap_ok: bool
    chain_rel_err: float
    chain_ok: bool


@dataclass(frozen=True)
class MembershipReport:
    per_layer: tuple
    ok: bool

    def first_violation(self):
        for m in self.per_layer:
            if not (m.cap_ok and m.chain_ok):
                return m
        return None


def membership(model, stack, rel_tol=CHAIN_REL_TOL):
    """Check a stack against the model's caps and chain equalities.

    The chain test at layer i compares gamma_{i-1} (or x) against
    D_i gamma_i with relative l2 tolerance ``rel_tol`` (absolute when the
    reference is zero).
    """
    if stack.depth != model.depth:
        raise DimensionError(
            f"stack has {stack.depth} layers, model has {model.depth}"
        )
    widths = model.stripe_widths()
    reports = []
    above = stack.x.data
    for i in range(1, model.depth + 1):
        gamma = stack.gammas[i - 1]
        nnz_inf = l0_inf_window(gamma, widths[i - 1])
        cap_ok = nnz_inf <= model.lambdas[i - 1]
        recon = model.layers[i - 1].apply(gamma).data
        ref_norm = float(np.linalg.norm(above))
        err = float(np.linalg.norm(recon - above))
        rel = err / ref_norm if ref_norm > 0 else err
        chain_ok = rel <= rel_tol
        reports.append(
            LayerMembership(i, model.lambdas[i - 1], nnz_inf, cap_ok, rel, chain_ok)
        )
        above = gamma.to_dense().data
    ok = all(m.cap_ok and m.chain_ok for m in reports)
    return MembershipReport(tuple(reports), ok)


def sample(model, rng, nnz, noise_sigma=0.0, max_tries=1000):
    """Draw a random in-model signal: (noisy y, clean LayerStack).

    The deepest support is drawn uniformly (without replacement) and
    redrawn until the stripe cap holds; coefficients are standard normal.
    The induced intermediate representations are then checked against
    their own caps — a model whose dictionaries are too dense can fail
    them, and after ``max_tries`` consecutive rejections an
    InfeasibleModelError names the first violated cap.  Noise is fresh
    per call: y = x + sigma * N(0, I).
    """
    geom_L = model.rep_geom(model.depth)
    if not 1 <= nnz <= geom_L.size:
        raise ConfigError(f"nnz must be in 1..{geom_L.size}")
    widths = model.stripe_widths()
    last_violation = None
    for _ in range(max_tries):
        idx = np.sort(rng.choice(geom_L.size, size=nnz, replace=False))
        vals = rng.standard_normal(nnz)
        gamma_L = SparseVec(geom_L, idx, vals)
        if l0_inf_window(gamma_L, widths[-1]) > model.lambdas[-1]:
            last_violation = model.depth
            continue
        stack = model.stack_from_deepest(gamma_L)
        violated = None
        for i in range(1, model.depth):
            if l0_inf_window(stack.gammas[i - 1], widths[i - 1]) > model.lambdas[i - 1]:
                violated = i
                break
        if violated is not None:
            last_violation = violated
            continue
        x = stack.x
        if noise_sigma > 0:
            y = DenseVec(x.geom, x.data + noise_sigma * rng.standard_normal(x.geom.size))
        else:
            y = DenseVec(x.geom, x.data.copy())
        return y, stack
    raise InfeasibleModelError(
        f"no cap-feasible sample in {max_tries} draws; first violated cap was "
        f"layer {last_violation} (lambda_{last_violation}="
        f"{model.lambdas[last_violation - 1]})"
    )


# ----------------------------------------------------------------------
# recovery strategies


@dataclass(frozen=True)
class PursuitOutcome:
    stack: LayerStack
    result: PursuitResult
    membership: MembershipReport


def _fill_cap_width(model, config):
    if config.l0inf_cap is not None and config.l0inf_width is None:
        return replace(config, l0inf_width=model.stripe_widths()[-1])
    return config


def ml_csc_pursuit(y, model, coder="omp", config=None):
    """Code the deepest layer against the effective dictionary, then
    back-propagate.  Intermediate caps are reported, not enforced."""
    config = config if config is not None else PursuitConfig()
    config = _fill_cap_width(model, config)
    result = run_coder(coder, y, model.effective(model.depth), config)
    stack = model.stack_from_deepest(result.coeffs)
    return PursuitOutcome(stack, result, membership(model, stack))


@dataclass(frozen=True)
class ProjectionStep:
    k: int
    accepted: bool
    residual_norm: float
    support_size: int
    violated_layer: int = None


@dataclass(frozen=True)
class ProjectionOutcome:
    stack: LayerStack
    trace: tuple
    residual_norm: float
    membership: MembershipReport


def ml_csc_project(y, model, config=None, warm_start=True):
    """Feasible recovery: sweep the deepest stripe cap from 1 to
    lambda_L, coding with stripe-capped OMP and keeping the last stack
    whose intermediate layers respect their caps.

    The sweep warm-starts each OMP run from the previous accepted
    support (cold start with ``warm_start=False``); a cap-k solution is
    always cap-(k+1) feasible, so accepted residual norms never
    increase.  The zero stack is the fallback, so the returned stack is
    always a member of the model.
    """
    config = config if config is not None else PursuitConfig()
    eff = model.effective(model.depth)
    width_L = model.stripe_widths()[-1]
    y_arr = y.data if isinstance(y, DenseVec) else np.asarray(y, dtype=np.float64)
    best_stack = model.zero_stack()
    best_res = float(np.linalg.norm(y_arr))
    trace = []
    prev_support = None
    for k in range(1, model.lambdas[-1] + 1):
        run_cfg = replace(
            config,
            k=None,
            l0inf_cap=k,
            l0inf_width=width_L,
            init_support=prev_support if warm_start else None,
        )
        result = omp(y, eff, run_cfg)
        stack = model.stack_from_deepest(result.coeffs)
        violated = None
        widths = model.stripe_widths()
        for i in range(1, model.depth):
            if l0_inf_window(stack.gammas[i - 1], widths[i - 1]) > model.lambdas[i - 1]:
                violated = i
                break
        step = ProjectionStep(
            k, violated is None, result.residual_norm,
            result.coeffs.nnz, violated,
        )
        trace.append(step)
        if violated is not None:
            break
        best_stack, best_res = stack, result.residual_norm
        prev_support = result.coeffs.idx
    return ProjectionOutcome(
        best_stack, tuple(trace), best_res, membership(model, best_stack)
    )


@dataclass(frozen=True)
class LayeredOutcome:
    gammas: tuple
    residual_norms: tuple


def layered_pursuit(y, model, coder="sp", per_layer_k=None, config=None):
    """Stage-wise baseline: code gamma_1 from y with D_1, then gamma_2
    from gamma_1-hat with D_2, and so on.  ``per_layer_k`` gives each
    stage's cardinality.  The result has no membership guarantee."""
    if per_layer_k is None or len(per_layer_k) != model.depth:
        raise ConfigError("layered_pursuit needs one cardinality per layer")
    config = config if config is not None else PursuitConfig()
    signal = y
    gammas = []
    residuals = []
    for i in range(1, model.depth + 1):
        run_cfg = replace(config, k=int(per_layer_k[i - 1]))
        result = run_coder(coder, signal, model.layer_dict(i), run_cfg)
        gammas.append(result.coeffs)
        residuals.append(result.residual_norm)
        signal = result.coeffs.to_dense()
    return LayeredOutcome(tuple(gammas), tuple(residuals))


# ----------------------------------------------------------------------
# comparison metrics


@dataclass(frozen=True)
class SupportMetrics:
    intersection: float
    l2_rel_err: float
    true_nnz: int
    est_nnz: int


def support_metrics(truth, estimate):
    """Support intersection ratio and relative l2 error.

    intersection = |S ∩ S_hat| / max(|S|, |S_hat|) (1.0 when both are
    empty); the relative error with a zero truth is 0 for a zero
    estimate and inf otherwise.
    """
    if truth.geom != estimate.geom:
        raise DimensionError("metrics need matching geometries")
    s_t, s_e = set(truth.idx.tolist()), set(estimate.idx.tolist())
    if not s_t and not s_e:
        inter = 1.0
    elif not s_t or not s_e:
        inter = 0.0
    else:
        inter = len(s_t & s_e) / max(len(s_t), len(s_e))
    t_norm = truth.norm()
    diff = truth.to_dense().data - estimate.to_dense().data
    if t_norm > 0:
        rel = float(np.linalg.norm(diff)) / t_norm
    else:
        rel = 0.0 if estimate.nnz == 0 else float("inf")
    return SupportMetrics(inter, rel, truth.nnz, estimate.nnz)


def stack_metrics(truth_stack, est_stack):
    return tuple(
        support_metrics(t, e)
        for t, e in zip(truth_stack.gammas, est_stack.gammas)
    )
