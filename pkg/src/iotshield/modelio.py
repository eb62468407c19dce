"""Versioned binary container shared by forest and autoencoder models.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"CDNA"
    4       2     container format version (FORMAT_VERSION)
    6       1     section type: 1 float forest, 2 quantized forest, 3 autoencoder
    7       2     feature schema version
    9       4     payload length N
    13      N     payload (section specific, below)
    13+N    4     CRC-32 of bytes [0, 13+N)

Forest params block (both forest sections)::

    u32 n_trees, u32 max_depth, u32 min_samples_leaf, i32 features_per_split (-1: default),
    u8 bootstrap, u8 balanced, f64 prune_alpha, u64 training_seed, u16 n_features

Float forest payload: params block, f64[n_features] feature_lo, f64[n_features]
feature_hi, then per tree ``u32 n_nodes`` followed by the nodes in pre-order.
A node is ``i8 feature`` (-1 for a leaf) and ``u32 benign, u32 attack``
training counts, then ``f64 threshold`` for internal nodes only. Children
are implied by the pre-order.

Quantized forest payload: params block, f64[n_features] lo, f64[n_features]
scale, then per tree ``u16 n_nodes, u16 n_internal``, ``i8 feature[n_nodes]``,
``u16 right[n_internal]``, ``u16 threshold_code[n_internal]``,
``u8 leaf_code[n_nodes - n_internal]``.

Autoencoder payload: ``u32 epochs, u32 batch_size, f64 learning_rate, u64 seed``,
``u8 n_dims``, ``u16 dims[n_dims]``, weights then biases as f64 row-major per
layer, ``u8 has_norm`` plus ``f64 lo[d], f64 hi[d]`` when set, and
``u32 n_calibration, f64 calibration[n_calibration]``.
"""

from __future__ import annotations

import enum
import struct
import zlib
from pathlib import Path

import numpy as np

from .autoenc import AEModel, AETrainConfig
from .errors import FEATURE_SCHEMA_VERSION, DataError
from .features import NormStats
from .forest import ForestModel, ForestParams, Internal, Leaf, QuantizedForest, QuantizedTree

MAGIC = b"CDNA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBHI")
_CRC = struct.Struct("<I")
_PARAMS = struct.Struct("<IIIiBBdQH")


class CorruptModel(DataError):
    pass


class VersionMismatch(DataError):
    pass


class Section(enum.IntEnum):
    FOREST = 1
    QUANTIZED_FOREST = 2
    AUTOENCODER = 3


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.data):
            raise CorruptModel("payload ends early")
        out = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return out

    def array(self, dtype: str, n: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        size = dt.itemsize * n
        if self.pos + size > len(self.data):
            raise CorruptModel("payload ends early")
        out = np.frombuffer(self.data, dtype=dt, count=n, offset=self.pos).astype(dt.newbyteorder("="))
        self.pos += size
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptModel(f"{len(self.data) - self.pos} unexpected trailing payload bytes")


def _le(a, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


# --- Forest sections ------------------------------------------------------------

def _pack_params(p: ForestParams, seed: int, n_features: int) -> bytes:
    fps = -1 if p.features_per_split is None else p.features_per_split
    return _PARAMS.pack(p.n_trees, p.max_depth, p.min_samples_leaf, fps, int(p.bootstrap),
                        int(p.balanced), float(p.prune_alpha), seed, n_features)


def _unpack_params(r: _Reader):
    n_trees, depth, leaf, fps, boot, bal, alpha, seed, n_features = r.take(_PARAMS)
    try:
        params = ForestParams(n_trees, depth, leaf, None if fps < 0 else fps, bool(boot), alpha, bool(bal))
    except ValueError as exc:
        raise CorruptModel(f"invalid forest parameters: {exc}") from None
    return params, seed, n_features


def _pack_forest(m: ForestModel) -> bytes:
    out = [_pack_params(m.params, m.training_seed, m.n_features),
           _le(m.feature_lo, "f8"), _le(m.feature_hi, "f8")]
    node_fmt, internal_fmt = struct.Struct("<bII"), struct.Struct("<bIId")
    for tree in m.trees:
        nodes = []
        stack = [tree]
        while stack:
            n = stack.pop()
            if isinstance(n, Leaf):
                nodes.append(node_fmt.pack(-1, *n.class_counts))
            else:
                nodes.append(internal_fmt.pack(n.feature_index, *n.class_counts, n.threshold))
                stack.extend((n.right, n.left))
        out.append(struct.pack("<I", len(nodes)))
        out.extend(nodes)
    return b"".join(out)


def _unpack_forest(r: _Reader, schema: int) -> ForestModel:
    params, seed, n_features = _unpack_params(r)
    lo = tuple(map(float, r.array("f8", n_features)))
    hi = tuple(map(float, r.array("f8", n_features)))
    trees = []
    for _ in range(params.n_trees):
        (n_nodes,) = r.take("I")
        budget = [n_nodes]

        def node():
            if budget[0] <= 0:
                raise CorruptModel("tree node count does not match its structure")
            budget[0] -= 1
            f, b, a = r.take("bII")
            if f < 0:
                if b + a == 0:
                    raise CorruptModel("leaf with no training samples")
                return Leaf((b, a))
            if f >= n_features:
                raise CorruptModel(f"feature index {f} out of range")
            (thr,) = r.take("d")
            left = node()
            return Internal(f, thr, left, node(), (b, a))

        trees.append(node())
        if budget[0]:
            raise CorruptModel("tree node count does not match its structure")
    return ForestModel(trees, n_features, lo, hi, params, seed, schema)


def _pack_quantized(q: QuantizedForest) -> bytes:
    out = [_pack_params(q.params, q.training_seed, q.n_features), _le(q.lo, "f8"), _le(q.scale, "f8")]
    for t in q.trees:
        internal = t.feature >= 0
        out += [struct.pack("<HH", t.feature.size, int(internal.sum())), _le(t.feature, "i1"),
                _le(t.right[internal], "u2"), _le(t.threshold_code, "u2"), _le(t.leaf_code, "u1")]
    return b"".join(out)


def _unpack_quantized(r: _Reader, schema: int) -> QuantizedForest:
    params, seed, n_features = _unpack_params(r)
    lo, scale = r.array("f8", n_features), r.array("f8", n_features)
    trees = []
    for _ in range(params.n_trees):
        n_nodes, n_internal = r.take("HH")
        feature = r.array("i1", n_nodes)
        internal = feature >= 0
        if int(internal.sum()) != n_internal or n_nodes != 2 * n_internal + 1:
            raise CorruptModel("quantized tree shape is inconsistent")
        if (feature >= n_features).any():
            raise CorruptModel("feature index out of range")
        right = np.zeros(n_nodes, dtype=np.uint16)
        right[internal] = r.array("u2", n_internal)
        if (right[internal] >= n_nodes).any():
            raise CorruptModel("child index out of range")
        trees.append(QuantizedTree(feature, right, r.array("u2", n_internal),
                                   r.array("u1", n_nodes - n_internal)))
    return QuantizedForest(trees, n_features, lo, scale, params, seed, schema)


# --- Autoencoder section --------------------------------------------------------

def _pack_ae(m: AEModel) -> bytes:
    c = m.config
    dims = m.layer_dims
    out = [struct.pack("<IIdQB", c.epochs, c.batch_size, c.learning_rate, c.seed, len(dims)),
           _le(dims, "u2")]
    out += [_le(w, "f8") for w in m.weights] + [_le(b, "f8") for b in m.biases]
    if m.norm_stats is None:
        out.append(b"\x00")
    else:
        out += [b"\x01", _le(m.norm_stats.lo, "f8"), _le(m.norm_stats.hi, "f8")]
    out += [struct.pack("<I", m.calibration.size), _le(m.calibration, "f8")]
    return b"".join(out)


def _unpack_ae(r: _Reader, schema: int) -> AEModel:
    epochs, batch, lr, seed, n_dims = r.take("IIdQB")
    try:
        cfg = AETrainConfig(epochs, batch, lr, seed)
    except ValueError as exc:
        raise CorruptModel(f"invalid training config: {exc}") from None
    if n_dims < 2:
        raise CorruptModel("autoencoder needs at least two layer widths")
    dims = [int(d) for d in r.array("u2", n_dims)]
    weights = [r.array("f8", a * b).reshape(a, b) for a, b in zip(dims, dims[1:])]
    biases = [r.array("f8", b) for b in dims[1:]]
    (has_norm,) = r.take("B")
    norm = None
    if has_norm:
        norm = NormStats(tuple(map(float, r.array("f8", dims[0]))), tuple(map(float, r.array("f8", dims[0]))))
    (n_cal,) = r.take("I")
    calibration = r.array("f8", n_cal)
    if not all(np.isfinite(a).all() for a in weights + biases):
        raise CorruptModel("non-finite autoencoder parameter")
    return AEModel(weights, biases, norm, cfg, schema, calibration)


_PACK = {ForestModel: (Section.FOREST, _pack_forest),
         QuantizedForest: (Section.QUANTIZED_FOREST, _pack_quantized),
         AEModel: (Section.AUTOENCODER, _pack_ae)}
_UNPACK = {Section.FOREST: _unpack_forest,
           Section.QUANTIZED_FOREST: _unpack_quantized,
           Section.AUTOENCODER: _unpack_ae}


def to_bytes(model) -> bytes:
    try:
        section, pack = _PACK[type(model)]
    except KeyError:
        raise TypeError(f"cannot serialize {type(model).__name__}") from None
    payload = pack(model)
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, section, model.feature_schema_version, len(payload)) + payload
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(data: bytes, expected_schema: int = FEATURE_SCHEMA_VERSION, expected=None):
    """Decode a container. ``expected`` optionally restricts the section type(s)."""
    if len(data) < _HEADER.size + _CRC.size:
        raise CorruptModel("file too short for a model container")
    magic, fmt, section, schema, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptModel("bad magic; not a model file")
    if len(data) != _HEADER.size + length + _CRC.size:
        raise CorruptModel(f"length mismatch: header declares {length} payload bytes")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise CorruptModel("checksum mismatch")
    if fmt != FORMAT_VERSION:
        raise VersionMismatch(f"container format {fmt}, this build reads {FORMAT_VERSION}")
    if schema != expected_schema:
        raise VersionMismatch(f"model built for feature schema v{schema}, pipeline uses v{expected_schema}")
    try:
        section = Section(section)
    except ValueError:
        raise CorruptModel(f"unknown section type {section}") from None
    if expected is not None:
        allowed = expected if isinstance(expected, tuple) else (expected,)
        if section not in allowed:
            raise DataError(f"expected a {' or '.join(s.name.lower() for s in allowed)} model, "
                            f"found {section.name.lower()}")
    r = _Reader(data[_HEADER.size:_HEADER.size + length])
    try:
        model = _UNPACK[section](r, schema)
    except (ValueError, RecursionError) as exc:
        raise CorruptModel(f"malformed payload: {exc}") from None
    r.done()
    return model


def save(model, path) -> int:
    """Write ``model`` to ``path``; returns the number of bytes written."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path, expected_schema: int = FEATURE_SCHEMA_VERSION, expected=None):
    return from_bytes(Path(path).read_bytes(), expected_schema, expected)
