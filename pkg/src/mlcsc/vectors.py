"""Signal and coefficient vectors on a circular 1-D spatial axis.

Everything in this package lives on a periodic spatial axis of
``spatial_len`` positions carrying ``channels`` values each.  A vector is
stored flat in channel-major order::

    flat index = position * channels + channel

Two window families are used throughout:

* a *patch* of width ``n`` starting at position ``i`` covers positions
  ``i, i+1, ..., i+n-1`` (circularly);
* a *stripe* of width ``2n - 1`` is centered at position ``i`` with left
  extent ``n - 1``, i.e. it covers ``i-(n-1), ..., i+(n-1)`` (circularly).

The pairing is deliberate: the patch starting at ``i`` of a filter-bank
reconstruction is determined exactly by the stripe centered at ``i`` of
the coefficients.  For decimated (strided) coefficient axes the stripe
width generalizes to ``ceil((2n-1)/s)`` placed with left extent
``(w-1)//2``; the ``*_window`` functions take that width directly.

Sparse vectors drop entries with ``|value| <= DROP_TOL`` (1e-12) at
construction; exact zeros are never stored.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

DROP_TOL = 1e-12


@dataclass(frozen=True)
class Geometry:
    """Circular spatial axis length and channel count of a vector."""

    spatial_len: int
    channels: int

    def __post_init__(self):
        if self.spatial_len < 1 or self.channels < 1:
            raise DimensionError(
                f"geometry must be positive, got {self.spatial_len}x{self.channels}"
            )

    @property
    def size(self) -> int:
        return self.spatial_len * self.channels

    def flat(self, position, channel):
        """Flat index of (position, channel), positions taken mod spatial_len."""
        return (position % self.spatial_len) * self.channels + channel

    def positions_of(self, flat_idx):
        """Spatial positions of an array of flat indices."""
        return np.asarray(flat_idx) // self.channels


@dataclass(frozen=True)
class DenseVec:
    """Contiguous float64 vector with explicit geometry."""

    geom: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if data.size != self.geom.size:
            raise DimensionError(
                f"data has {data.size} entries, geometry wants {self.geom.size}"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, geom):
        return cls(geom, np.zeros(geom.size))

    def norm(self):
        return float(np.linalg.norm(self.data))

    def to_sparse(self, tol=DROP_TOL):
        return SparseVec.from_dense(self)


@dataclass(frozen=True)
class SparseVec:
    """Sparse vector: sorted unique flat indices and their values.

    Construction refuses duplicate indices and out-of-range indices, and
    silently drops entries with ``|value| <= DROP_TOL``.
    """

    geom: Geometry
    idx: np.ndarray = field(default=None)
    val: np.ndarray = field(default=None)

    def __post_init__(self):
        idx = np.asarray(self.idx if self.idx is not None else [], dtype=np.int64).ravel()
        val = np.asarray(self.val if self.val is not None else [], dtype=np.float64).ravel()
        if idx.size != val.size:
            raise DimensionError("index and value arrays differ in length")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.geom.size:
                raise DimensionError(
                    f"flat index out of range for geometry of size {self.geom.size}"
                )
            order = np.argsort(idx, kind="stable")
            idx, val = idx[order], val[order]
            if np.any(np.diff(idx) == 0):
                raise DimensionError("duplicate flat indices in one construction call")
        keep = np.abs(val) > DROP_TOL
        object.__setattr__(self, "idx", idx[keep])
        object.__setattr__(self, "val", val[keep])

    @classmethod
    def empty(cls, geom):
        return cls(geom, [], [])

    @classmethod
    def from_dense(cls, vec):
        idx = np.flatnonzero(np.abs(vec.data) > DROP_TOL)
        return cls(vec.geom, idx, vec.data[idx])

    def to_dense(self):
        data = np.zeros(self.geom.size)
        data[self.idx] = self.val
        return DenseVec(self.geom, data)

    @property
    def nnz(self) -> int:
        return int(self.idx.size)

    def norm(self):
        return float(np.linalg.norm(self.val))


def _as_data(vec):
    """Dense float64 array of either vector type, with its geometry."""
    if isinstance(vec, SparseVec):
        return vec.to_dense().data, vec.geom
    if isinstance(vec, DenseVec):
        return vec.data, vec.geom
    raise TypeError(f"expected DenseVec or SparseVec, got {type(vec).__name__}")


def support(vec, tol=DROP_TOL):
    """Flat indices with |value| > tol, sorted ascending."""
    if isinstance(vec, SparseVec):
        return vec.idx[np.abs(vec.val) > tol].copy()
    data, _ = _as_data(vec)
    return np.flatnonzero(np.abs(data) > tol)


def l0(vec, tol=DROP_TOL):
    return int(support(vec, tol).size)


def l2(vec):
    return vec.norm()


def window_positions(geom, start, width):
    """Spatial positions of a circular window, deduplicated.

    Positions are listed in window order starting at ``start``; when
    ``width >= spatial_len`` the window covers the whole axis once.
    """
    S = geom.spatial_len
    w = min(int(width), S)
    return (int(start) + np.arange(w)) % S


def window_flat_indices(geom, start, width):
    """Flat indices (all channels) of a circular window, in window order."""
    pos = window_positions(geom, start, width)
    return (pos[:, None] * geom.channels + np.arange(geom.channels)[None, :]).ravel()


def stripe_start(position, width):
    """Start position of a centered window: left extent (width-1)//2."""
    return position - (width - 1) // 2


def extract_patch(vec, position, width):
    """Patch of ``width`` positions starting at ``position``, all channels.

    Returns a vector of the same kind with local geometry
    ``(min(width, spatial_len), channels)``.
    """
    data, geom = _as_data(vec)
    flat = window_flat_indices(geom, position, width)
    local = Geometry(min(int(width), geom.spatial_len), geom.channels)
    out = DenseVec(local, data[flat])
    return SparseVec.from_dense(out) if isinstance(vec, SparseVec) else out


def extract_stripe(vec, position, n):
    """Stripe of width 2n-1 centered at ``position`` (left extent n-1).

    When the stripe is at least as wide as the axis it contains the whole
    vector (each entry exactly once), starting at the window start.
    """
    width = 2 * int(n) - 1
    return extract_patch(vec, stripe_start(position, width), width)


def _window_maxima(vec, width, centered, weights):
    """Max over all window placements of the windowed sum of ``weights``.

    ``weights`` is a per-entry nonnegative array aligned with the vector's
    nonzero entries (1 for counting, value**2 for energies).  Uses prefix
    sums over per-position totals; O(size) regardless of window width.
    """
    if isinstance(vec, SparseVec):
        idx, geom = vec.idx, vec.geom
    else:
        data, geom = _as_data(vec)
        idx = np.flatnonzero(np.abs(data) > DROP_TOL)
    S = geom.spatial_len
    w = min(int(width), S)
    if w < 1:
        raise DimensionError(f"window width must be >= 1, got {width}")
    per_pos = np.bincount(idx // geom.channels, weights=weights, minlength=S)
    pref = np.concatenate([[0.0], np.cumsum(np.concatenate([per_pos, per_pos]))])
    starts = np.arange(S)
    if centered:
        # window j starts at j - (w-1)//2; shift into [0, S) for the
        # doubled prefix array
        starts = (starts - (w - 1) // 2) % S
    sums = pref[starts + w] - pref[starts]
    return float(sums.max())


def _entry_weights(vec, squared):
    if isinstance(vec, SparseVec):
        vals = vec.val
    else:
        data, _ = _as_data(vec)
        vals = data[np.flatnonzero(np.abs(data) > DROP_TOL)]
    return vals**2 if squared else np.ones(vals.size)


def l0_inf_window(vec, width):
    """Max nonzero count over centered circular windows of ``width`` positions."""
    if l0(vec) == 0:
        return 0
    return int(round(_window_maxima(vec, width, True, _entry_weights(vec, False))))


def l2_inf_window(vec, width):
    """Max l2 norm over centered circular windows of ``width`` positions."""
    if l0(vec) == 0:
        return 0.0
    return float(np.sqrt(_window_maxima(vec, width, True, _entry_weights(vec, True))))


def l0_inf_stripe(vec, n):
    """Max nonzero count over stripes of width 2n-1 (all channels)."""
    return l0_inf_window(vec, 2 * int(n) - 1)


def l2_inf_stripe(vec, n):
    """Max l2 norm over stripes of width 2n-1 (all channels)."""
    return l2_inf_window(vec, 2 * int(n) - 1)


def l0_inf_patch(vec, n):
    """Max nonzero count over patches of width n (all channels)."""
    if l0(vec) == 0:
        return 0
    return int(round(_window_maxima(vec, n, False, _entry_weights(vec, False))))


def l2_inf_patch(vec, n):
    """Max l2 norm over patches of width n (all channels)."""
    if l0(vec) == 0:
        return 0.0
    return float(np.sqrt(_window_maxima(vec, n, False, _entry_weights(vec, True))))


def stripe_width(n, stride=1):
    """Stripe width on a stride-decimated coefficient axis.

    ceil((2n-1)/stride): reduces to 2n-1 for stride 1 and to a couple of
    positions (full coverage of a degenerate axis) when stride reaches n.
    """
    return -((2 * int(n) - 1) // -int(stride))


def hard_threshold_array(data, k):
    """Keep the k largest-magnitude entries of a flat array.

    Ties at the k-th magnitude are broken toward the lowest flat index.
    Returns (thresholded copy, kept indices sorted ascending).
    """
    data = np.asarray(data, dtype=np.float64)
    k = int(k)
    if k <= 0:
        return np.zeros_like(data), np.empty(0, dtype=np.int64)
    if k >= data.size:
        return data.copy(), np.arange(data.size, dtype=np.int64)
    # lexsort: primary key = magnitude descending, secondary = index ascending
    order = np.lexsort((np.arange(data.size), -np.abs(data)))
    keep = np.sort(order[:k])
    out = np.zeros_like(data)
    out[keep] = data[keep]
    return out, keep


def hard_threshold(vec, k):
    """Best k-term approximation (largest magnitudes, ties to lowest index)."""
    data, geom = _as_data(vec)
    out, _ = hard_threshold_array(data, k)
    dense = DenseVec(geom, out)
    return SparseVec.from_dense(dense) if isinstance(vec, SparseVec) else dense


def soft_threshold_array(data, tau):
    """Entrywise soft threshold: sign(x) * max(|x| - tau, 0)."""
    data = np.asarray(data, dtype=np.float64)
    return np.sign(data) * np.maximum(np.abs(data) - float(tau), 0.0)


def soft_threshold(vec, tau):
    data, geom = _as_data(vec)
    dense = DenseVec(geom, soft_threshold_array(data, tau))
    return SparseVec.from_dense(dense) if isinstance(vec, SparseVec) else dense
