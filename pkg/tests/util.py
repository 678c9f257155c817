"""Shared test oracles.

Deliberately naive, loop-based reimplementations of the contracts under
test.  Nothing here may import the operator code paths it checks: layer
matrices are built entry by entry from the kernel definition, window
norms by enumerating every placement, and so on.
"""

import numpy as np

from mlcsc.vectors import Geometry


def dense_layer_matrix(kernels, stride, spatial_len):
    """Entry-by-entry realization of one convolutional layer.

    Column (p, f) places filter f at input position p*stride; row order
    is channel-major (position * channels + channel) on both sides.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    m_out, n, m_in = kernels.shape
    if spatial_len % stride != 0:
        raise ValueError("stride must divide the spatial length")
    positions = spatial_len // stride
    mat = np.zeros((spatial_len * m_in, positions * m_out))
    for p in range(positions):
        for f in range(m_out):
            col = p * m_out + f
            for o in range(n):
                row_pos = (p * stride + o) % spatial_len
                for c in range(m_in):
                    mat[row_pos * m_in + c, col] += kernels[f, o, c]
    return mat


def dense_effective_matrix(kernel_list, stride_list, spatial_len):
    """Product of per-layer dense realizations, outermost first."""
    mat = None
    s = spatial_len
    for kernels, stride in zip(kernel_list, stride_list):
        layer = dense_layer_matrix(kernels, stride, s)
        mat = layer if mat is None else mat @ layer
        s = s // stride
    return mat


def window_norm_oracle(data, geom, width, centered, counting):
    """Brute-force sup over circular windows.

    ``counting`` True returns the max nonzero count, otherwise the max
    l2 norm.  Windows wider than the axis cover it exactly once.
    """
    data = np.asarray(data, dtype=np.float64)
    S, C = geom.spatial_len, geom.channels
    w = min(int(width), S)
    best = 0.0
    for anchor in range(S):
        start = anchor - (w - 1) // 2 if centered else anchor
        vals = []
        for t in range(w):
            pos = (start + t) % S
            for c in range(C):
                vals.append(data[pos * C + c])
        vals = np.array(vals)
        score = (
            float(np.count_nonzero(np.abs(vals) > 1e-12))
            if counting
            else float(np.linalg.norm(vals))
        )
        best = max(best, score)
    return best


def brute_best_k(D, y, k):
    """Exhaustive best k-sparse least-squares fit (tiny dictionaries only)."""
    from itertools import combinations

    m = D.shape[1]
    best = (np.inf, None, None)
    for sup in combinations(range(m), k):
        sub = D[:, sup]
        coef, *_ = np.linalg.lstsq(sub, y, rcond=None)
        err = float(np.linalg.norm(sub @ coef - y))
        if err < best[0] - 1e-12:
            best = (err, np.array(sup), coef)
    return best


def ista_reference(D, y, lam, iters=4000):
    """Plain unaccelerated ISTA on 0.5*||y - Dx||^2 + lam*||x||_1."""
    step = 1.0 / np.linalg.norm(D, 2) ** 2
    x = np.zeros(D.shape[1])
    for _ in range(iters):
        g = D.T @ (D @ x - y)
        z = x - step * g
        x = np.sign(z) * np.maximum(np.abs(z) - step * lam, 0.0)
    return x


def central_difference(f, x0, h=1e-6):
    """Full central-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        xp = x0.copy()
        xp[ix] += h
        xm = x0.copy()
        xm[ix] -= h
        g[ix] = (f(xp) - f(xm)) / (2 * h)
    return g


def support_delta_oracle(D, indices):
    """Exact two-sided RIP constant of one restricted support."""
    sub = D[:, np.asarray(indices, dtype=np.int64)]
    eig = np.linalg.eigvalsh(sub.T @ sub)
    return float(max(eig[-1] - 1.0, 1.0 - eig[0]))


def random_conv_stack(rng, max_spatial=32, max_layers=3):
    """A random valid layer chain: kernel arrays, strides, signal geometry.

    Strides are drawn from {1, 2} subject to dividing the running
    spatial length; filter widths never exceed it.
    """
    depth = int(rng.integers(1, max_layers + 1))
    spatial = int(rng.choice([8, 12, 16, 24, max_spatial]))
    channels = 1
    kernels, strides = [], []
    s = spatial
    for _ in range(depth):
        stride = int(rng.choice([1, 2])) if s % 2 == 0 and s >= 4 else 1
        n = int(rng.integers(stride, min(5, s) + 1))
        m_out = int(rng.integers(1, 4))
        kernels.append(rng.standard_normal((m_out, n, channels)))
        strides.append(stride)
        s //= stride
        channels = m_out
    return kernels, strides, Geometry(spatial, 1)


def glyph_images(count, seed=0):
    """Synthetic digit-like 28x28 glyphs: strokes, arcs, and loops drawn
    with anti-aliased distance masks.  Deterministic in (count, seed)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    out = np.zeros((count, 28, 28), dtype=np.uint8)
    for i in range(count):
        canvas = np.zeros((28, 28))
        for _ in range(int(rng.integers(1, 4))):
            kind = rng.integers(0, 2)
            thick = rng.uniform(1.0, 2.2)
            if kind == 0:  # line segment
                a = rng.uniform(4, 24, size=2)
                b = rng.uniform(4, 24, size=2)
                ab = b - a
                denom = float(ab @ ab) + 1e-9
                t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0, 1)
                d = np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))
            else:  # circular arc
                cx, cy = rng.uniform(8, 20, size=2)
                r = rng.uniform(4, 9)
                d = np.abs(np.hypot(xx - cx, yy - cy) - r)
                theta = np.arctan2(yy - cy, xx - cx)
                lo = rng.uniform(-np.pi, np.pi)
                span = rng.uniform(np.pi, 2 * np.pi)
                off = (theta - lo) % (2 * np.pi)
                d = np.where(off <= span, d, np.inf)
            canvas = np.maximum(canvas, np.clip(1.0 - d / thick, 0.0, 1.0))
        out[i] = np.round(255 * canvas).astype(np.uint8)
    return out
