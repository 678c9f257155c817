"""Convolutional dictionaries and their compositions.

A :class:`ConvLayer` is a bank of ``m_out`` filters, each a sparse kernel
of spatial width ``n`` over ``m_in`` input channels, placed circularly at
every ``stride``-th position of the input axis.  As a linear map it sends
a coefficient vector on the decimated axis (``spatial/stride`` positions,
``m_out`` channels) to a signal on the input axis (``spatial`` positions,
``m_in`` channels).

Layers are immutable.  Geometry is supplied by the vectors they act on;
the matrix realization for a given spatial length is built lazily (as a
scipy CSR matrix) and cached, so repeated applies are a single sparse
matvec.

:class:`EffectiveDict` is a chain ``D_1 D_2 ... D_k`` of compatible
layers bound to a concrete signal geometry; it is the dictionary the
pursuit algorithms see.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NormalizationError
from .vectors import DROP_TOL, DenseVec, Geometry, SparseVec

UNIT_NORM_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """Sparse filter bank: ``m_out`` kernels of width ``n`` x ``m_in``.

    Kernel entries are stored as four aligned flat arrays (filter, offset,
    channel, value), canonically ordered by (filter, offset, channel).
    Entries with ``|value| <= 1e-12`` are dropped at construction;
    duplicate coordinates are refused.
    """

    m_in: int
    m_out: int
    n: int
    stride: int
    filt: np.ndarray
    off: np.ndarray
    ch: np.ndarray
    val: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if min(self.m_in, self.m_out, self.n, self.stride) < 1:
            raise DimensionError("m_in, m_out, n, stride must all be >= 1")
        if self.stride > self.n:
            raise DimensionError(
                f"stride {self.stride} larger than filter width {self.n} "
                "would leave uncovered samples"
            )
        filt = np.asarray(self.filt, dtype=np.int64).ravel()
        off = np.asarray(self.off, dtype=np.int64).ravel()
        ch = np.asarray(self.ch, dtype=np.int64).ravel()
        val = np.asarray(self.val, dtype=np.float64).ravel()
        if not (filt.size == off.size == ch.size == val.size):
            raise DimensionError("kernel coordinate arrays differ in length")
        if filt.size:
            if filt.min() < 0 or filt.max() >= self.m_out:
                raise DimensionError("filter index out of range")
            if off.min() < 0 or off.max() >= self.n:
                raise DimensionError("kernel offset out of range")
            if ch.min() < 0 or ch.max() >= self.m_in:
                raise DimensionError("kernel channel out of range")
        if not np.all(np.isfinite(val)):
            raise DimensionError("kernel values must be finite")
        # canonical order (filter, offset, channel), then duplicate check
        key = (filt * self.n + off) * self.m_in + ch
        order = np.argsort(key, kind="stable")
        key, filt, off, ch, val = key[order], filt[order], off[order], ch[order], val[order]
        if key.size and np.any(np.diff(key) == 0):
            raise DimensionError("duplicate kernel coordinates")
        keep = np.abs(val) > DROP_TOL
        object.__setattr__(self, "filt", filt[keep])
        object.__setattr__(self, "off", off[keep])
        object.__setattr__(self, "ch", ch[keep])
        object.__setattr__(self, "val", val[keep])

    # ------------------------------------------------------------------
    # constructors

    @classmethod
    def from_dense(cls, kernels, stride=1):
        """Build from a dense (m_out, n, m_in) kernel array."""
        kernels = np.asarray(kernels, dtype=np.float64)
        if kernels.ndim != 3:
            raise DimensionError("dense kernels must have shape (m_out, n, m_in)")
        m_out, n, m_in = kernels.shape
        filt, off, ch = np.nonzero(np.abs(kernels) > DROP_TOL)
        return cls(m_in, m_out, n, stride, filt, off, ch, kernels[filt, off, ch])

    def to_dense_kernels(self):
        out = np.zeros((self.m_out, self.n, self.m_in))
        out[self.filt, self.off, self.ch] = self.val
        return out

    # ------------------------------------------------------------------
    # basic facts

    @property
    def kernel_nnz(self) -> int:
        return int(self.val.size)

    @property
    def coord_count(self) -> int:
        return self.m_out * self.n * self.m_in

    def sparsity_fraction(self):
        """Fraction of kernel coordinates that are exactly zero."""
        return 1.0 - self.kernel_nnz / self.coord_count

    def filter_nnz(self):
        return np.bincount(self.filt, minlength=self.m_out).astype(np.int64)

    def max_filter_nnz(self) -> int:
        return int(self.filter_nnz().max()) if self.kernel_nnz else 0

    def atom_norms(self):
        """Per-filter l2 norm.  Circular placement never clips a kernel,
        so every placed copy of filter f has this same norm."""
        return np.sqrt(np.bincount(self.filt, weights=self.val**2, minlength=self.m_out))

    def is_unit_norm(self, tol=1e-10):
        return bool(np.all(np.abs(self.atom_norms() - 1.0) <= tol))

    def normalized(self):
        """Rescale every filter to unit norm.  Zero filters are refused."""
        norms = self.atom_norms()
        if np.any(norms <= 0.0):
            dead = int(np.flatnonzero(norms <= 0.0)[0])
            raise NormalizationError(f"filter {dead} has zero norm, cannot normalize")
        return ConvLayer(
            self.m_in, self.m_out, self.n, self.stride,
            self.filt, self.off, self.ch, self.val / norms[self.filt],
        )

    # ------------------------------------------------------------------
    # geometry and matrix realization

    def rep_geometry(self, signal_geom):
        """Coefficient geometry for a given input-side geometry."""
        if signal_geom.channels != self.m_in:
            raise DimensionError(
                f"layer expects {self.m_in} input channels, geometry has "
                f"{signal_geom.channels}"
            )
        S = signal_geom.spatial_len
        if S % self.stride != 0:
            raise DimensionError(
                f"spatial length {S} is not divisible by stride {self.stride}"
            )
        if self.n > S:
            raise DimensionError(
                f"filter width {self.n} exceeds spatial length {S}"
            )
        return Geometry(S // self.stride, self.m_out)

    def signal_geometry(self, rep_geom):
        if rep_geom.channels != self.m_out:
            raise DimensionError(
                f"layer has {self.m_out} filters, coefficient geometry has "
                f"{rep_geom.channels} channels"
            )
        sig = Geometry(rep_geom.spatial_len * self.stride, self.m_in)
        self.rep_geometry(sig)  # re-validate n <= spatial_len
        return sig

    def matrix(self, spatial_len):
        """CSR realization for input spatial length ``spatial_len``.

        Shape is (spatial_len * m_in, (spatial_len/stride) * m_out);
        column (p, f) holds filter f placed at position p*stride with
        circular wraparound.  Cached per spatial length.
        """
        S = int(spatial_len)
        key = ("matrix", S)
        if key not in self._cache:
            self.rep_geometry(Geometry(S, self.m_in))  # validates
            P = S // self.stride
            pos = np.arange(P) * self.stride
            rows = (((pos[:, None] + self.off[None, :]) % S) * self.m_in
                    + self.ch[None, :]).ravel()
            cols = (np.arange(P)[:, None] * self.m_out + self.filt[None, :]).ravel()
            data = np.broadcast_to(self.val, (P, self.val.size)).ravel()
            mat = sp.coo_matrix(
                (data, (rows, cols)), shape=(S * self.m_in, P * self.m_out)
            ).tocsr()
            self._cache[key] = mat
        return self._cache[key]

    def matrix_t(self, spatial_len):
        key = ("matrix_t", int(spatial_len))
        if key not in self._cache:
            self._cache[key] = self.matrix(spatial_len).T.tocsr()
        return self._cache[key]

    def apply(self, coeffs):
        """Reconstruct the input-side signal from coefficients."""
        sig = self.signal_geometry(coeffs.geom)
        data = coeffs.to_dense().data if isinstance(coeffs, SparseVec) else coeffs.data
        return DenseVec(sig, self.matrix(sig.spatial_len) @ data)

    def adjoint(self, signal):
        """Apply the transpose: correlations of every filter placement."""
        rep = self.rep_geometry(signal.geom)
        data = signal.to_dense().data if isinstance(signal, SparseVec) else signal.data
        return DenseVec(rep, self.matrix_t(signal.geom.spatial_len) @ data)

    def nonzero_row_count(self, signal_spatial_len, rep_indices):
        """Rows of the matrix realization touched by the given columns.

        This is the count of input-side coordinates that at least one
        selected atom can reach (row support of the column restriction).
        """
        S = int(signal_spatial_len)
        rep_indices = np.asarray(rep_indices, dtype=np.int64).ravel()
        if rep_indices.size == 0:
            return 0
        pos = rep_indices // self.m_out
        f = rep_indices % self.m_out
        rows = []
        for p, fi in zip(pos, f):
            sel = self.filt == fi
            rows.append(((p * self.stride + self.off[sel]) % S) * self.m_in
                        + self.ch[sel])
        return int(np.unique(np.concatenate(rows)).size)


def effective_support_len(ns, strides):
    """Spatial support of a composed atom.

    r_1 = n_1 and r_j = r_{j-1} + (n_j - 1) * (s_1 ... s_{j-1}); for
    stride-1 chains this telescopes to sum(n_j) - (len-1).
    """
    ns, strides = list(ns), list(strides)
    if len(ns) != len(strides) or not ns:
        raise DimensionError("need one (n, stride) pair per layer")
    r = ns[0]
    cum = strides[0]
    for n_j, s_j in zip(ns[1:], strides[1:]):
        r += (n_j - 1) * cum
        cum *= s_j
    return int(r)


@dataclass(frozen=True, eq=False)
class EffectiveDict:
    """A chain of layers bound to a signal geometry, D = D_1 ... D_k.

    Validates channel chaining and stride divisibility on construction.
    ``apply``/``adjoint`` run layer by layer; the batch ``*_array``
    forms go through the composed sparse matrix (cached, still sparse —
    never densified).
    """

    layers: tuple
    signal_geom: Geometry
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionError("effective dictionary needs at least one layer")
        object.__setattr__(self, "layers", layers)
        geoms = [self.signal_geom]
        for i, layer in enumerate(layers):
            try:
                geoms.append(layer.rep_geometry(geoms[-1]))
            except DimensionError as exc:
                raise DimensionError(f"layer {i + 1}: {exc}") from exc
        object.__setattr__(self, "_geoms", tuple(geoms))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_geom(self) -> Geometry:
        """Geometry of the deepest coefficient vector."""
        return self._geoms[-1]

    def rep_geom(self, i):
        """Geometry after layer i (i=0 is the signal itself)."""
        return self._geoms[i]

    @property
    def shape(self):
        return (self.signal_geom.size, self.out_geom.size)

    def stride_product(self) -> int:
        p = 1
        for layer in self.layers:
            p *= layer.stride
        return p

    def support_len(self) -> int:
        return effective_support_len(
            [l.n for l in self.layers], [l.stride for l in self.layers]
        )

    # ------------------------------------------------------------------
    # operator action

    def apply(self, coeffs):
        if coeffs.geom != self.out_geom:
            raise DimensionError(
                f"coefficients have geometry {coeffs.geom}, dictionary wants "
                f"{self.out_geom}"
            )
        vec = coeffs
        for layer in reversed(self.layers):
            vec = layer.apply(vec)
        return vec

    def adjoint(self, signal):
        if signal.geom != self.signal_geom:
            raise DimensionError(
                f"signal has geometry {signal.geom}, dictionary wants "
                f"{self.signal_geom}"
            )
        vec = signal
        for layer in self.layers:
            vec = layer.adjoint(vec)
        return vec

    def apply_array(self, arr):
        """Apply to a flat array or a (size, k) batch of columns.

        Goes through the composed sparse matrix rather than chaining the
        per-layer ones: the product has at most one entry per (signal
        sample, effective atom) pair, which is far fewer than the widest
        intermediate layer carries, so each application is cheaper after
        the one-time composition.
        """
        return self.matrix() @ arr

    def adjoint_array(self, arr):
        return self.matrix_t() @ arr

    def columns(self, indices):
        """Materialize selected effective atoms as a dense (N, k) array."""
        indices = np.asarray(indices, dtype=np.int64).ravel()
        cols = sp.csc_matrix(
            (np.ones(indices.size), (indices, np.arange(indices.size))),
            shape=(self.out_geom.size, indices.size),
        )
        out = self.apply_array(cols)
        return np.asarray(out.todense()) if sp.issparse(out) else out

    def matrix(self):
        """Composed sparse matrix D_1 ... D_k (cached).

        Built from the position-zero representative atoms: one sparse
        chain product restricted to m_L columns gives every distinct
        atom, and the remaining columns are those entries rolled by
        multiples of the stride product.  Columns that are circular
        shifts of each other in exact arithmetic therefore come out
        bit-identical, which a full sparse product would not give (its
        per-column accumulation order varies with the wraparound).
        """
        if "matrix" not in self._cache:
            m_L = self.layers[-1].m_out
            P = self.out_geom.spatial_len
            picks = sp.csc_matrix(
                (np.ones(m_L), (np.arange(m_L), np.arange(m_L))),
                shape=(self.out_geom.size, m_L),
            )
            reps = picks
            for i in range(self.depth - 1, -1, -1):
                reps = self.layers[i].matrix(self._geoms[i].spatial_len) @ reps
            reps = reps.tocoo()
            S = self.signal_geom.spatial_len
            C = self.signal_geom.channels
            shifts = np.arange(P) * self.stride_product()
            pos, ch = reps.row // C, reps.row % C
            rows = (((pos[None, :] + shifts[:, None]) % S) * C + ch[None, :]).ravel()
            cols = (np.arange(P)[:, None] * m_L + reps.col[None, :]).ravel()
            data = np.broadcast_to(reps.data, (P, reps.data.size)).ravel()
            mat = sp.coo_matrix((data, (rows, cols)), shape=self.shape)
            self._cache["matrix"] = mat.tocsr()
        return self._cache["matrix"]

    def matrix_t(self):
        """Transpose of the composed matrix, cached in CSR form."""
        if "matrix_t" not in self._cache:
            self._cache["matrix_t"] = self.matrix().T.tocsr()
        return self._cache["matrix_t"]

    def materialize(self, max_spatial_len=1024):
        """Dense matrix realization, guarded to small signal axes."""
        if self.signal_geom.spatial_len > max_spatial_len:
            raise DimensionError(
                f"refusing to densify a dictionary on a spatial axis of "
                f"{self.signal_geom.spatial_len} (> {max_spatial_len}) samples"
            )
        return self.matrix().toarray()

    def column_norms(self):
        """Norms of all effective atoms.

        Circular shift invariance: every placement of deepest-layer
        filter f (placements step by the stride product) has the norm of
        its position-0 representative.
        """
        m_L = self.layers[-1].m_out
        reps = self.columns(np.arange(m_L))
        rep_norms = np.linalg.norm(reps, axis=0)
        P = self.out_geom.spatial_len
        return np.tile(rep_norms, P), reps, rep_norms

    def lipschitz(self, iters=50):
        """Power-iteration estimate of the squared spectral norm ||D||^2.

        Deterministic fixed-seed Gaussian start; converges to the top
        eigenvalue of D^T D from below.  An all-ones start would be
        exactly orthogonal to the leading (oscillatory) eigenvector of
        many shift-invariant Grams and the iteration would never leave
        that subspace, so a generic start is required, not a nicety.
        """
        key = ("lipschitz", iters)
        if key not in self._cache:
            v = np.random.default_rng(7).standard_normal(self.out_geom.size)
            v /= np.linalg.norm(v)
            lam = 1.0
            for _ in range(iters):
                w = self.adjoint_array(self.apply_array(v))
                lam = float(np.linalg.norm(w))
                if lam <= 0.0:
                    break
                v = w / lam
            self._cache[key] = lam
        return self._cache[key]

    def mutual_coherence(self):
        """Max absolute inner product between distinct normalized atoms.

        Shift invariance reduces the search to pairs (representative at
        position 0, any atom).  Single layers must already have unit-norm
        filters (refused otherwise); for deeper chains the composed atoms
        are not unit-norm even when every layer is, so columns are
        normalized internally (each layer must still have unit filters).
        """
        if "mu" in self._cache:
            return self._cache["mu"]
        for i, layer in enumerate(self.layers):
            if not layer.is_unit_norm(UNIT_NORM_TOL):
                raise NormalizationError(
                    f"layer {i + 1} filters are not unit-norm; normalize "
                    "before measuring coherence"
                )
        all_norms, reps, rep_norms = self.column_norms()
        if np.any(rep_norms <= 0.0):
            raise NormalizationError("an effective atom has zero norm")
        gram = (self.matrix().T @ reps) / rep_norms[None, :]
        gram /= all_norms[:, None]
        m_L = self.layers[-1].m_out
        # column j of the full dictionary equals representative g exactly
        # when j indexes (position 0, filter g)
        diag = np.arange(m_L)
        gram[diag, diag] = 0.0
        mu = float(np.abs(gram).max()) if gram.size > 1 else 0.0
        self._cache["mu"] = mu
        return mu


def single_layer_dict(layer, signal_geom):
    """A one-layer EffectiveDict (the layer bound to a geometry)."""
    return EffectiveDict((layer,), signal_geom)


def canonical_coherence_geometry(layer):
    """Smallest valid geometry on which a lone layer's coherence equals
    its value on every larger axis (all overlapping relative shifts are
    realized once the axis reaches 2n-1, rounded up to the stride)."""
    S = layer.stride * (-((2 * layer.n - 1) // -layer.stride))
    return Geometry(S, layer.m_in)


def mutual_coherence(D, signal_geom=None):
    """Coherence of a ConvLayer (on an optional geometry) or EffectiveDict."""
    if isinstance(D, EffectiveDict):
        return D.mutual_coherence()
    if isinstance(D, ConvLayer):
        geom = signal_geom if signal_geom is not None else canonical_coherence_geometry(D)
        return single_layer_dict(D, geom).mutual_coherence()
    raise TypeError(f"expected ConvLayer or EffectiveDict, got {type(D).__name__}")
