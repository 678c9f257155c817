"""File formats: dictionary containers, signal matrices, IDX images, CSV.

Three on-disk formats are owned by this package:

* **dictionary container** — an ASCII header describing the layer stack
  (format version, geometry, caps, layer count, per-layer
  ``m_in m_out n stride nnz`` plus per-filter entry counts) followed by
  one binary triplet array per layer: ``(offset: u32, channel: u32,
  value: f64)``, little-endian, filter-major in the layer's canonical
  coordinate order.  Serialization is canonical, so save -> load -> save
  is byte-identical.

* **signal matrix** — a 16-byte header (magic ``MLCS``, version u32,
  rows u32, cols u32, little-endian) followed by a row-major float64
  little-endian payload; one signal per row.

* **IDX** — the classic big-endian image/label format (magic 0x00000803
  for ubyte image tensors, 0x00000801 for ubyte label vectors).

See docs/formats.md for the full byte-level layout and the CSV schemas
the CLI emits.
"""

import csv
import struct

import numpy as np

from .errors import FormatError
from .vectors import Geometry

DICT_MAGIC = "MLCSCDICT"
DICT_VERSION = 1
SIGNAL_MAGIC = b"MLCS"
SIGNAL_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_TRIPLET = struct.Struct("<IId")


# ----------------------------------------------------------------------
# dictionary container


def save_model(model, path):
    """Write a model (layer stack + geometry + caps) to ``path``."""
    header = [f"{DICT_MAGIC} {DICT_VERSION}"]
    header.append(
        f"geometry {model.signal_geom.spatial_len} {model.signal_geom.channels}"
    )
    header.append("lambdas " + " ".join(str(int(l)) for l in model.lambdas))
    header.append(f"layers {len(model.layers)}")
    for layer in model.layers:
        header.append(
            f"layer {layer.m_in} {layer.m_out} {layer.n} {layer.stride} "
            f"{layer.kernel_nnz}"
        )
        counts = layer.filter_nnz()
        header.append("counts " + " ".join(str(int(c)) for c in counts))
    header.append("end")
    blob = ("\n".join(header) + "\n").encode("ascii")
    chunks = [blob]
    for layer in model.layers:
        arr = np.empty(layer.kernel_nnz, dtype=[("off", "<u4"), ("ch", "<u4"), ("val", "<f8")])
        arr["off"] = layer.off
        arr["ch"] = layer.ch
        arr["val"] = layer.val
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)


def _header_fields(line, keyword, count, lineno):
    parts = line.split()
    if not parts or parts[0] != keyword:
        raise FormatError(
            f"dictionary header line {lineno}: expected '{keyword} ...', got {line!r}"
        )
    if count is not None and len(parts) - 1 != count:
        raise FormatError(
            f"dictionary header line {lineno}: '{keyword}' wants {count} fields, "
            f"got {len(parts) - 1}"
        )
    try:
        return [int(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"dictionary header line {lineno}: non-integer field") from exc


def load_model(path):
    """Read a dictionary container back into an MLCSCModel."""
    from .model import MLCSCModel
    from .dictionaries import ConvLayer

    with open(path, "rb") as f:
        raw = f.read()
    end_marker = b"\nend\n"
    split = raw.find(end_marker)
    if split < 0:
        raise FormatError("dictionary container has no 'end' header marker", offset=0)
    try:
        header = raw[:split].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError("dictionary header is not ASCII") from exc
    body = raw[split + len(end_marker):]
    body_base = split + len(end_marker)

    if not header or header[0] != f"{DICT_MAGIC} {DICT_VERSION}":
        raise FormatError(
            f"bad magic line {header[0] if header else ''!r}; expected "
            f"'{DICT_MAGIC} {DICT_VERSION}'",
            offset=0,
        )
    spatial_len, channels = _header_fields(header[1], "geometry", 2, 2)
    lambdas = _header_fields(header[2], "lambdas", None, 3)
    (num_layers,) = _header_fields(header[3], "layers", 1, 4)
    if len(lambdas) != num_layers:
        raise FormatError(
            f"{len(lambdas)} caps for {num_layers} layers in dictionary header"
        )
    if len(header) != 4 + 2 * num_layers:
        raise FormatError(
            f"dictionary header has {len(header)} lines, expected "
            f"{4 + 2 * num_layers} for {num_layers} layers"
        )

    layers = []
    offset = 0
    for i in range(num_layers):
        m_in, m_out, n, stride, nnz = _header_fields(
            header[4 + 2 * i], "layer", 5, 5 + 2 * i
        )
        counts = _header_fields(header[5 + 2 * i], "counts", m_out, 6 + 2 * i)
        if sum(counts) != nnz:
            raise FormatError(
                f"layer {i + 1}: per-filter counts sum to {sum(counts)}, "
                f"header says nnz={nnz}"
            )
        nbytes = nnz * _TRIPLET.size
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(
                f"layer {i + 1}: triplet array truncated, wanted {nbytes} bytes, "
                f"file has {len(chunk)}",
                offset=body_base + offset + len(chunk),
            )
        arr = np.frombuffer(chunk, dtype=[("off", "<u4"), ("ch", "<u4"), ("val", "<f8")])
        filt = np.repeat(np.arange(m_out, dtype=np.int64), counts)
        layers.append(
            ConvLayer(
                m_in, m_out, n, stride,
                filt, arr["off"].astype(np.int64), arr["ch"].astype(np.int64),
                arr["val"].astype(np.float64),
            )
        )
        offset += nbytes
    if offset != len(body):
        raise FormatError(
            f"{len(body) - offset} trailing bytes after the last layer",
            offset=body_base + offset,
        )
    return MLCSCModel(
        layers=tuple(layers),
        signal_geom=Geometry(spatial_len, channels),
        lambdas=tuple(lambdas),
    )


# ----------------------------------------------------------------------
# signal matrices


def save_signals(path, signals):
    """Write a (rows, cols) float64 matrix of flattened signals."""
    signals = np.ascontiguousarray(np.atleast_2d(signals), dtype=np.float64)
    if signals.ndim != 2:
        raise FormatError("signal matrix must be 2-D (rows = signals)")
    rows, cols = signals.shape
    with open(path, "wb") as f:
        f.write(SIGNAL_MAGIC)
        f.write(struct.pack("<III", SIGNAL_VERSION, rows, cols))
        f.write(signals.astype("<f8").tobytes())


def load_signals(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(
            f"signal file has only {len(raw)} bytes, header needs 16", offset=len(raw)
        )
    if raw[:4] != SIGNAL_MAGIC:
        raise FormatError(f"bad signal magic {raw[:4]!r}, expected {SIGNAL_MAGIC!r}", offset=0)
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != SIGNAL_VERSION:
        raise FormatError(f"unsupported signal format version {version}", offset=4)
    want = rows * cols * 8
    if len(raw) - 16 != want:
        raise FormatError(
            f"signal payload has {len(raw) - 16} bytes, header promises {want}",
            offset=16 + min(len(raw) - 16, want),
        )
    return np.frombuffer(raw[16:], dtype="<f8").reshape(rows, cols).copy()


# ----------------------------------------------------------------------
# IDX


def _read_idx(raw, magic_want, ndim, path):
    if len(raw) < 4:
        raise FormatError(f"{path}: IDX file shorter than its magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != magic_want:
        raise FormatError(
            f"{path}: IDX magic 0x{magic:08x}, expected 0x{magic_want:08x}", offset=0
        )
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(
            f"{path}: IDX header truncated ({len(raw)} bytes, dimension fields "
            f"need {head})",
            offset=len(raw),
        )
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    want = int(np.prod(dims))
    payload = raw[head:]
    if len(payload) != want:
        raise FormatError(
            f"{path}: IDX payload has {len(payload)} bytes, dimensions "
            f"{dims} promise {want}",
            offset=head + min(len(payload), want),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_images(path):
    """ubyte image tensor (count, rows, cols) from an IDX file."""
    with open(path, "rb") as f:
        raw = f.read()
    return _read_idx(raw, IDX_IMAGE_MAGIC, 3, str(path))


def read_idx_labels(path):
    with open(path, "rb") as f:
        raw = f.read()
    return _read_idx(raw, IDX_LABEL_MAGIC, 1, str(path))


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise FormatError("IDX images must be (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8).ravel()
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


# ----------------------------------------------------------------------
# CSV


def write_csv(path, fieldnames, rows, comments=()):
    """Schema-first CSV: optional '#' comment lines, then a header row.

    Values are written with Python's shortest round-trip float repr, so
    identical inputs produce identical bytes (comments excepted).
    """
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def read_csv(path):
    """Rows of a schema-first CSV as (fieldnames, list-of-dicts),
    skipping '#' comments."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.reader(lines)
    fields = next(reader)
    return fields, [dict(zip(fields, row)) for row in reader]


def write_stacks_csv(path, stacks, comments=()):
    """Dump representation stacks: one row per nonzero coefficient.

    Columns are (sample, layer, flat_index, value); layer counts from 1.
    """
    def rows():
        for s, stack in enumerate(stacks):
            for i, gamma in enumerate(stack.gammas, start=1):
                for j, v in zip(gamma.idx, gamma.val):
                    yield (s, i, int(j), float(v))

    write_csv(path, ("sample", "layer", "flat_index", "value"), rows(), comments)
