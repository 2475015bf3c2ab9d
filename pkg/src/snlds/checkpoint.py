"""Binary parameter checkpoints.

Layout (all integers and floats little-endian)::

    magic     8 bytes   b"SNLDSCKP"
    version   u32       currently 1
    count     u32       number of records
    record * count:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      u64 * ndim
        values    f64 * prod(dims), row-major

Records are written in pytree flattening order, so a checkpoint can be loaded
back into a template of the same structure.
"""

from __future__ import annotations

import struct
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from snlds.errors import ConfigurationError

MAGIC = b"SNLDSCKP"
VERSION = 1


def flatten(tree) -> list[tuple[str, np.ndarray]]:
    """Ordered (name, array) records for every leaf of ``tree``."""
    leaves, _ = jax.tree_util.tree_flatten_with_path(tree)
    return [(jax.tree_util.keystr(path), np.asarray(leaf, dtype=np.float64))
            for path, leaf in leaves]


def unflatten_like(template, records: list[tuple[str, np.ndarray]]):
    """Rebuild a pytree shaped like ``template`` from ``records``."""
    expected = flatten(template)
    if len(expected) != len(records):
        raise ConfigurationError(
            f"checkpoint holds {len(records)} tensors, model expects {len(expected)}")
    by_name = dict(records)
    dtypes = [jnp.asarray(leaf).dtype for leaf in jax.tree_util.tree_leaves(template)]
    leaves = []
    for (name, ref), dtype in zip(expected, dtypes):
        if name not in by_name:
            raise ConfigurationError(f"checkpoint is missing tensor {name}")
        value = by_name[name]
        if value.shape != ref.shape:
            raise ConfigurationError(
                f"tensor {name} has shape {value.shape} in checkpoint, model expects {ref.shape}")
        leaves.append(jnp.asarray(value, dtype=dtype))
    treedef = jax.tree_util.tree_structure(template)
    return jax.tree_util.tree_unflatten(treedef, leaves)


def encode(records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, value in records:
        raw = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ConfigurationError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    pos = 16
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        records.append((name, values.astype(np.float64)))
    if pos != len(blob):
        raise ConfigurationError("trailing bytes after last checkpoint record")
    return records


def save(path, tree) -> None:
    Path(path).write_bytes(encode(flatten(tree)))


def load_records(path) -> list[tuple[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load(path, template):
    return unflatten_like(template, load_records(path))
