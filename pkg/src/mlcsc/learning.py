"""Online multi-layer convolutional dictionary learning.

Per minibatch: code the deepest representation with monotone FISTA
against the current effective dictionary, then walk the layers from the
deepest down to the second applying momentum-smoothed projected gradient
steps — gradient, hard-threshold to the layer's kernel-sparsity policy,
renormalize — and finish with a plain (unthresholded) gradient step on
the first layer, also renormalized.

Conventions worth spelling out once:

* The training objective weighs the data term as ||y - D x||^2 (not
  halved) with an l1 weight ``lambda_l1``; the FISTA engine minimizes
  the halved form, so the coding step runs at ``lambda_l1 / 2`` — the
  two objectives have identical minimizers.
* Gradients are taken with respect to kernel coordinates (each kernel
  value is tied across all of its circular placements), computed through
  operator applications and one small GEMM per kernel offset — never by
  materializing a dense dictionary.  The Frobenius penalty ``iota`` acts
  on kernel coordinates too, contributing 2*iota*kernel.
* Filters are renormalized to unit norm after every update round.
* Momentum buffers are per-layer and reset at epoch boundaries.  The
  configured step ``eta`` is dimensionless: each layer's raw step is
  eta * (1 - momentum) divided by a per-epoch power-iteration estimate
  of the data term's curvature in that layer's kernels, so batch size
  and code scale do not change what a given eta means.
* With a zero step size the dictionaries are left untouched (the trace
  is still produced).
"""

import math
from dataclasses import dataclass

import numpy as np

from .dictionaries import ConvLayer
from .errors import ConfigError, DimensionError, MLCSCError
from .model import MLCSCModel
from .pursuit import _fista_core
from .vectors import DROP_TOL, DenseVec, SparseVec

# the coding step divides by a power-iteration estimate of the
# effective dictionary's squared spectral norm, inflated by this margin;
# a full run seeds the estimate and a few warm-started iterations per
# batch track the dictionary as it drifts
_LIP_MARGIN = 1.2
_LIP_ITERS = 30
_LIP_WARM_ITERS = 5

# the dictionary step for layer i divides by an estimate of the data
# term's curvature with respect to that layer's kernels (codes held
# fixed), estimated once per epoch on the first batch and inflated by
# this margin to cover drift across the epoch
_DICT_LIP_MARGIN = 1.5
_DICT_LIP_ITERS = 8


@dataclass(frozen=True)
class ZetaPolicy:
    """Kernel-sparsity rule for one layer's hard-threshold projection.

    mode "fraction" keeps the ceil(value * total) largest kernel
    coordinates layer-wide; "magnitude" keeps |v| >= value; "count"
    keeps the top-``value`` coordinates of every filter.  All modes tie
    by lowest flat (filter, offset, channel) index, and every filter's
    largest coordinate is always retained so no filter can be emptied
    (normalization would be undefined).  ``weight`` is the coordinate
    price this layer contributes to the training objective's l0 term;
    it defaults to the threshold in magnitude mode and to 0 otherwise
    (where the count is held constant by construction).
    """

    mode: str
    value: float
    weight: float = None

    def __post_init__(self):
        if self.mode not in ("fraction", "magnitude", "count"):
            raise ConfigError(f"unknown zeta policy mode {self.mode!r}")
        if self.mode == "fraction" and not 0.0 < self.value <= 1.0:
            raise ConfigError("fraction policy needs a value in (0, 1]")
        if self.mode == "magnitude" and self.value < 0.0:
            raise ConfigError("magnitude policy needs a nonnegative value")
        if self.mode == "count" and int(self.value) < 1:
            raise ConfigError("count policy needs a value >= 1")
        if self.weight is None:
            object.__setattr__(
                self, "weight", self.value if self.mode == "magnitude" else 0.0
            )

    def mask(self, kernels):
        """Boolean keep-mask over a dense (m_out, n, m_in) kernel array."""
        mags = np.abs(kernels)
        m_out = kernels.shape[0]
        per_filter = mags.reshape(m_out, -1)
        reserved = per_filter.argmax(axis=1) + np.arange(m_out) * per_filter.shape[1]
        flat = mags.ravel()
        keep = np.zeros(flat.size, dtype=bool)
        keep[reserved] = True
        if self.mode == "magnitude":
            keep |= flat >= self.value
        elif self.mode == "fraction":
            want = max(m_out, math.ceil(self.value * flat.size))
            order = np.lexsort((np.arange(flat.size), -flat))
            extra = order[~keep[order]]
            keep[extra[: want - m_out]] = True
        else:
            count = int(self.value)
            width = per_filter.shape[1]
            for f in range(m_out):
                row = per_filter[f]
                order = np.lexsort((np.arange(width), -row))
                keep[f * width + order[:count]] = True
        return keep.reshape(kernels.shape)


def hard_threshold_dict(layer, policy):
    """Project a layer onto its kernel-sparsity policy and renormalize."""
    kernels = layer.to_dense_kernels()
    kernels = np.where(policy.mask(kernels), kernels, 0.0)
    return ConvLayer.from_dense(kernels, layer.stride).normalized()


@dataclass(frozen=True)
class LearnConfig:
    """Training knobs.  Defaults: 20 epochs of 100-sample batches,
    unit step with 0.9 momentum, one inner update iteration, Frobenius
    weight 1e-3.  ``lambda_l1`` left None is tuned by bisection on the
    first batch to hit ``target_nnz`` mean code nonzeros."""

    epochs: int = 20
    batch_size: int = 100
    eta: float = 1.0
    momentum: float = 0.9
    T: int = 1
    iota: float = 1e-3
    lambda_l1: float = None
    target_nnz: float = 15.0
    zetas: tuple = ()
    fista_iters: int = 60
    fista_tol: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("step size eta must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        object.__setattr__(self, "zetas", tuple(self.zetas))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    data_term: float
    mean_residual: float
    mean_code_nnz: float
    layer_sparsity: tuple


@dataclass(frozen=True)
class TrainTrace:
    records: tuple
    lambda_used: float

    def losses(self):
        return tuple(r.loss for r in self.records)

    def rows(self):
        """Flat rows for CSV emission, one per (epoch, layer)."""
        out = []
        for r in self.records:
            for i, s in enumerate(r.layer_sparsity, start=1):
                out.append((r.epoch, r.loss, r.data_term, r.mean_residual,
                            r.mean_code_nnz, i, s))
        return out


# ----------------------------------------------------------------------
# batches and objective


def _columns(data, size, what):
    """Coerce a vector / list of vectors / array into a (size, B) batch."""
    if isinstance(data, (DenseVec, SparseVec)):
        vec = data.to_dense() if isinstance(data, SparseVec) else data
        arr = vec.data[:, None]
    elif isinstance(data, (list, tuple)):
        cols = []
        for item in data:
            vec = item.to_dense() if isinstance(item, SparseVec) else item
            cols.append(vec.data)
        arr = np.stack(cols, axis=1)
    else:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != size:
        raise DimensionError(f"{what} must form a ({size}, batch) column block")
    return np.ascontiguousarray(arr, dtype=np.float64)


def _policy_for(config, i):
    """The zeta policy configured for layer i (>= 2), if any."""
    if not config.zetas:
        return None
    return config.zetas[i - 2]


def objective_eval(batch, model, codes, config):
    """The full training objective on a batch: squared reconstruction
    error, the Frobenius and coordinate-count dictionary penalties, and
    the weighted code l1 term."""
    Y = _columns(batch, model.signal_geom.size, "batch")
    G = _columns(codes, model.rep_geom(model.depth).size, "codes")
    resid = model.effective(model.depth).apply_array(G) - Y
    value = float(np.sum(resid * resid))
    lam = config.lambda_l1 if config.lambda_l1 is not None else 0.0
    value += lam * float(np.sum(np.abs(G)))
    for i, layer in enumerate(model.layers, start=1):
        value += config.iota * float(np.sum(layer.val * layer.val))
        if i >= 2:
            policy = _policy_for(config, i)
            if policy is not None:
                value += policy.weight * layer.kernel_nnz
    return value


# ----------------------------------------------------------------------
# gradient


def dict_gradient(batch, model, codes, layer_index, iota=0.0):
    """Gradient of the squared data term (plus the Frobenius penalty)
    with respect to one layer's kernel coordinates.

    Chain rule in operator form: with A the prefix (layers before i),
    B-codes the suffix applied to the deepest codes, the matrix-space
    gradient is 2 A^T (x_hat - y) (codes_i)^T; tying the circular
    placements of each kernel value sums that over placements, which is
    one (positions*batch)-row GEMM per kernel offset.
    """
    if not 1 <= layer_index <= model.depth:
        raise DimensionError(
            f"layer index {layer_index} outside 1..{model.depth}"
        )
    Y = _columns(batch, model.signal_geom.size, "batch")
    G = _columns(codes, model.rep_geom(model.depth).size, "codes")

    level = _code_levels(model, G)
    U = level[0] - Y
    for j in range(1, layer_index):
        U = model.layers[j - 1].matrix_t(model.rep_geom(j - 1).spatial_len) @ U

    frame = _LayerFrame(model, layer_index, level[layer_index], Y.shape[1])
    grad = 2.0 * frame.adjoint(U)
    if iota:
        grad += 2.0 * iota * model.layers[layer_index - 1].to_dense_kernels()
    return grad


def _code_levels(model, G):
    """Representations at every level walking a code batch down to the
    signal: level[i] is the (rep_size_i, batch) block, level[0] the
    reconstructions."""
    level = [None] * (model.depth + 1)
    level[model.depth] = G
    down = G
    for j in range(model.depth, 0, -1):
        down = model.layers[j - 1].matrix(model.rep_geom(j - 1).spatial_len) @ down
        level[j - 1] = down
    return level


class _LayerFrame:
    """The linear map from one layer's kernel coordinates to that
    layer's output contribution, with the level-i codes held fixed.

    ``forward`` realizes kernels into the (input_size, batch) block they
    produce; ``adjoint`` collapses such a block back onto kernel
    coordinates (summing over circular placements).  Both are one small
    GEMM per kernel offset; the placement row sets are disjoint within
    an offset because the stride divides the spatial length.
    """

    def __init__(self, model, layer_index, level_codes, n_batch):
        layer = model.layers[layer_index - 1]
        in_geom = model.rep_geom(layer_index - 1)
        out_geom = model.rep_geom(layer_index)
        self.n = layer.n
        self.n_batch = n_batch
        self.s_in, self.m_in = in_geom.spatial_len, in_geom.channels
        self.positions, self.m_out = out_geom.spatial_len, out_geom.channels
        starts = np.arange(self.positions) * layer.stride
        self.rows = [(starts + o) % self.s_in for o in range(self.n)]
        V = level_codes.reshape(self.positions, self.m_out, n_batch)
        self.V2 = np.ascontiguousarray(V.transpose(0, 2, 1)).reshape(
            self.positions * n_batch, self.m_out
        )

    def forward(self, kernels):
        out = np.zeros((self.s_in, self.n_batch, self.m_in))
        for o in range(self.n):
            block = self.V2 @ kernels[:, o, :]
            out[self.rows[o]] += block.reshape(self.positions, self.n_batch, self.m_in)
        return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(
            self.s_in * self.m_in, self.n_batch
        )

    def adjoint(self, block):
        U3 = np.ascontiguousarray(
            block.reshape(self.s_in, self.m_in, self.n_batch).transpose(0, 2, 1)
        )
        grad = np.empty((self.m_out, self.n, self.m_in))
        for o in range(self.n):
            U_o = U3[self.rows[o]].reshape(self.positions * self.n_batch, self.m_in)
            grad[:, o, :] = self.V2.T @ U_o
        return grad


def _kernel_map_lipschitz(model, codes, layer_index, iota):
    """Curvature bound for the data term as a function of one layer's
    kernels, codes fixed: twice the squared spectral norm of the map
    kernels -> reconstruction, plus the Frobenius term's 2*iota.

    Power iteration in kernel space; each pass goes kernels -> signal
    through the prefix layers and back.  Deterministic: starts from the
    layer's current kernels blended with a fixed-seed Gaussian so the
    start is warm but never exactly orthogonal to the top singular
    direction (a pure structured start can be, and then the iteration
    stalls).
    """
    G = _columns(codes, model.rep_geom(model.depth).size, "codes")
    level = _code_levels(model, G)
    frame = _LayerFrame(model, layer_index, level[layer_index], G.shape[1])
    prefix = [
        model.layers[j - 1].matrix(model.rep_geom(j - 1).spatial_len)
        for j in range(1, layer_index)
    ]
    prefix_t = [
        model.layers[j - 1].matrix_t(model.rep_geom(j - 1).spatial_len)
        for j in range(1, layer_index)
    ]
    W = model.layers[layer_index - 1].to_dense_kernels().copy()
    norm = float(np.linalg.norm(W))
    if norm == 0.0:
        return 2.0 * iota
    W /= norm
    jitter = np.random.default_rng(7).standard_normal(W.shape)
    W += 0.05 * jitter / np.linalg.norm(jitter)
    W /= np.linalg.norm(W)
    sigma2 = 0.0
    for _ in range(_DICT_LIP_ITERS):
        X = frame.forward(W)
        for mat in reversed(prefix):
            X = mat @ X
        for mat in prefix_t:
            X = mat @ X
        W = frame.adjoint(X)
        sigma2 = float(np.linalg.norm(W))
        if sigma2 <= 0.0:
            break
        W /= sigma2
    return 2.0 * sigma2 + 2.0 * iota


# ----------------------------------------------------------------------
# lambda tuning


def tune_lambda(model, batch, target_nnz, fista_iters=40, rounds=16, rel_tol=0.15):
    """Bisect the l1 weight until the mean code nonzero count lands near
    the target.  Geometric bisection between a vanishing weight and the
    smallest weight that zeroes every code; deterministic."""
    Y = _columns(batch, model.signal_geom.size, "batch")
    eff = model.effective(model.depth)
    step = 1.0 / (_LIP_MARGIN * max(eff.lipschitz(_LIP_ITERS), 1e-30))
    corr = eff.adjoint_array(Y)
    hi = 2.0 * float(np.max(np.abs(corr)))
    if hi == 0.0:
        return 0.0
    lo = hi * 1e-6

    def mean_nnz(lam):
        X, _, _, _, _ = _fista_core(
            eff.apply_array, eff.adjoint_array, Y, 0.5 * lam, step, fista_iters, 1e-8
        )
        return float(np.count_nonzero(np.abs(X) > DROP_TOL)) / Y.shape[1]

    lam = hi
    for _ in range(rounds):
        lam = math.sqrt(lo * hi)
        nnz = mean_nnz(lam)
        if abs(nnz - target_nnz) <= rel_tol * target_nnz:
            return lam
        if nnz > target_nnz:
            lo = lam
        else:
            hi = lam
    return lam


# ----------------------------------------------------------------------
# training loop


def _swap_layer(model, i, layer):
    layers = list(model.layers)
    layers[i - 1] = layer
    return MLCSCModel(tuple(layers), model.signal_geom, model.lambdas)


def train(dataset, model, config):
    """Run the learning loop; returns (trained model, per-epoch trace).

    ``dataset`` is a (count, signal_size) array of sample rows or a list
    of vectors (already centered).  The initial model must have unit-norm
    filters.  Identical seed and dataset order reproduce the trace
    bit for bit.  A non-finite loss aborts with the partial trace
    attached to the raised error.
    """
    if isinstance(dataset, np.ndarray):
        data = np.ascontiguousarray(dataset.T, dtype=np.float64)
    else:
        data = _columns(list(dataset), model.signal_geom.size, "dataset")
    if data.shape[0] != model.signal_geom.size:
        raise DimensionError(
            f"dataset rows of length {data.shape[0]} against signal size "
            f"{model.signal_geom.size}"
        )
    if not model.is_unit_norm(1e-8):
        raise ConfigError("initial model must have unit-norm filters")
    if config.zetas and len(config.zetas) != model.depth - 1:
        raise ConfigError(
            f"{len(config.zetas)} zeta policies for {model.depth - 1} "
            "thresholded layers"
        )
    count = data.shape[1]
    rng = np.random.default_rng(config.seed)

    lam = config.lambda_l1
    if lam is None:
        pilot = data[:, : min(count, config.batch_size)]
        lam = tune_lambda(
            model, pilot, config.target_nnz, fista_iters=config.fista_iters
        )
    run_cfg = config if config.lambda_l1 is not None else _with_lambda(config, lam)

    records = []
    lip_vec = None
    lip_val = 0.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(count) if config.shuffle else np.arange(count)
        buffers = {
            i: np.zeros((l.m_out, l.n, l.m_in))
            for i, l in enumerate(model.layers, start=1)
        }
        lips = {}
        obj_sum = data_sum = res_sum = nnz_sum = 0.0
        for lo_idx in range(0, count, config.batch_size):
            sel = order[lo_idx: lo_idx + config.batch_size]
            Y = data[:, sel]
            eff = model.effective(model.depth)
            iters = _LIP_ITERS if lip_vec is None else _LIP_WARM_ITERS
            if lip_vec is None:
                lip_vec = np.random.default_rng(7).standard_normal(eff.out_geom.size)
                lip_vec /= np.linalg.norm(lip_vec)
            for _ in range(iters):
                w = eff.adjoint_array(eff.apply_array(lip_vec))
                lip_val = float(np.linalg.norm(w))
                if lip_val <= 0.0:
                    break
                lip_vec = w / lip_val
            step = 1.0 / (_LIP_MARGIN * max(lip_val, 1e-30))
            codes, _, _, _, _ = _fista_core(
                eff.apply_array, eff.adjoint_array, Y, 0.5 * lam, step,
                config.fista_iters, config.fista_tol,
            )
            resid = eff.apply_array(codes) - Y
            batch_obj = objective_eval(Y, model, codes, run_cfg)
            if not np.isfinite(batch_obj):
                err = MLCSCError(
                    f"non-finite loss at epoch {epoch}, sample offset {lo_idx}"
                )
                err.trace = TrainTrace(tuple(records), lam)
                raise err
            obj_sum += batch_obj
            data_sum += float(np.sum(resid * resid))
            res_sum += float(np.sum(np.linalg.norm(resid, axis=0)))
            nnz_sum += float(np.count_nonzero(np.abs(codes) > DROP_TOL))

            if config.eta > 0:
                if not lips:
                    lips = {
                        i: _kernel_map_lipschitz(model, codes, i, config.iota)
                        for i in range(1, model.depth + 1)
                    }
                model = _update_round(model, Y, codes, run_cfg, buffers, lips)
        records.append(EpochRecord(
            epoch=epoch,
            loss=obj_sum / count,
            data_term=data_sum / count,
            mean_residual=res_sum / count,
            mean_code_nnz=nnz_sum / count,
            layer_sparsity=tuple(l.sparsity_fraction() for l in model.layers),
        ))
    return model, TrainTrace(tuple(records), lam)


def _with_lambda(config, lam):
    fields = {k: getattr(config, k) for k in LearnConfig.__dataclass_fields__}
    fields["lambda_l1"] = lam
    return LearnConfig(**fields)


def _update_round(model, Y, codes, config, buffers, lips):
    """One dictionary pass: deepest layer down to layer 2 with the
    threshold projection, then the first layer plain; all renormalized.

    The configured step is scaled per layer by (1 - momentum) over the
    layer's curvature estimate, so eta = 1 takes unit-curvature steps
    whose momentum-accumulated magnitude matches a plain gradient step.
    """
    for i in range(model.depth, 1, -1):
        policy = _policy_for(config, i)
        scale = config.eta * (1.0 - config.momentum) / max(lips[i], 1e-30)
        for _ in range(config.T):
            grad = dict_gradient(Y, model, codes, i, iota=config.iota)
            buffers[i] = config.momentum * buffers[i] + grad
            kernels = model.layers[i - 1].to_dense_kernels() - scale * buffers[i]
            if policy is not None:
                kernels = np.where(policy.mask(kernels), kernels, 0.0)
            layer = ConvLayer.from_dense(kernels, model.layers[i - 1].stride)
            model = _swap_layer(model, i, layer.normalized())
    scale = config.eta * (1.0 - config.momentum) / max(lips[1], 1e-30)
    for _ in range(config.T):
        grad = dict_gradient(Y, model, codes, 1, iota=config.iota)
        buffers[1] = config.momentum * buffers[1] + grad
        kernels = model.layers[0].to_dense_kernels() - scale * buffers[1]
        layer = ConvLayer.from_dense(kernels, model.layers[0].stride)
        model = _swap_layer(model, 1, layer.normalized())
    return model


# ----------------------------------------------------------------------
# initialization


def random_model(rng, signal_geom, specs, lambdas, policies=None):
    """A random normalized model: kernels drawn standard normal, layers
    past the first optionally projected to their sparsity policy.

    ``specs`` is a sequence of (m_out, n, stride) triples from the
    signal inward; ``policies`` (aligned with layers 2..L) may hold
    None entries.
    """
    layers = []
    channels = signal_geom.channels
    for i, (m_out, n, stride) in enumerate(specs, start=1):
        kernels = rng.standard_normal((m_out, n, channels))
        if i >= 2 and policies is not None:
            policy = policies[i - 2]
            if policy is not None:
                kernels = np.where(policy.mask(kernels), kernels, 0.0)
        layers.append(ConvLayer.from_dense(kernels, stride).normalized())
        channels = m_out
    return MLCSCModel(tuple(layers), signal_geom, tuple(lambdas))
