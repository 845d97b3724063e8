"""
Binary container for reduced bases.

Layout (little-endian):
    b"RBAS" | u16 format version | u32 header length | JSON header | float64 payload | u32 CRC32

The payload holds vectors, inner_vectors, reduced_a0, reduced_components, reduced_load and
the provenance parameters, in that order. The CRC covers every preceding byte. The inner
product and operator are rebuilt from the header (mesh size and coefficient model), so the
file stays independent of the sparse matrix layout.
"""

import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from app.core.errors import (
    BasisChecksumError,
    BasisFileError,
    BasisTruncatedError,
    BasisVersionError,
    InvalidArgumentError,
)
from app.services.fem import assemble, build_mesh
from app.services.greedy import ReducedBasis
from app.services.params import AffineCoefficientModel

logger = logging.getLogger(__name__)

MAGIC = b"RBAS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")
_F8 = np.dtype("<f8")


def _header(rb: ReducedBasis) -> Dict[str, Any]:
    op = rb.operator
    if op is None:
        raise InvalidArgumentError("only bases built on an assembled operator can be saved")
    model = op.model
    return {
        "format_version": FORMAT_VERSION,
        "d": rb.d,
        "n": rb.n,
        "n_h": rb.n_h,
        "n_provenance": len(rb.provenance),
        "grid_n": op.mesh.grid_n,
        "k": model.k,
        "t": model.t,
        "delta": model.delta,
        "abar": model.abar,
        "amplitudes": list(model.amplitudes),
        "load_label": op.load_label,
        "metadata": rb.metadata,
    }


def _payload(rb: ReducedBasis) -> bytes:
    provenance = np.array(rb.provenance, dtype=np.float64).reshape(len(rb.provenance), rb.d)
    parts = [rb.vectors, rb.inner_vectors, rb.reduced_a0, rb.reduced_components, rb.reduced_load, provenance]
    return b"".join(np.ascontiguousarray(p, dtype=_F8).tobytes() for p in parts)


def save_basis(rb: ReducedBasis, path: Union[str, Path]) -> Path:
    """Write rb to path through a temporary file and an atomic rename."""
    path = Path(path)
    header = json.dumps(_header(rb), sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + _payload(rb)
    data = body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    logger.info("saved basis n=%d (n_h=%d) to %s", rb.n, rb.n_h, path)
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Header only, without decoding or checking the payload."""
    header, _ = _split(Path(path).read_bytes())
    return header


def _split(data: bytes) -> Tuple[Dict[str, Any], int]:
    if len(data) < _PREFIX.size:
        raise BasisTruncatedError(f"file is {len(data)} bytes, shorter than the fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BasisFileError(f"not a basis file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise BasisVersionError(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise BasisTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BasisChecksumError(f"header is corrupt: {e}") from e
    return header, start + header_len


def _shapes(header: Dict[str, Any]) -> Tuple[Tuple[int, ...], ...]:
    d, n, n_h, n_prov = header["d"], header["n"], header["n_h"], header["n_provenance"]
    return (n_h, n), (n_h, n), (n, n), (d, n, n), (n,), (n_prov, d)


def load_basis(path: Union[str, Path]) -> ReducedBasis:
    """
    Read a basis written by save_basis. Arrays come back bit-identical; the operator is
    rebuilt when the file records a constant load.

    Raises:
        BasisVersionError, BasisTruncatedError, BasisChecksumError, BasisFileError
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise BasisFileError(f"cannot read {path}: {e}") from e
    header, offset = _split(data)
    try:
        shapes = _shapes(header)
    except (KeyError, TypeError) as e:
        raise BasisChecksumError(f"header is missing fields: {e}") from e
    n_values = sum(int(np.prod(s)) for s in shapes)
    expected = offset + 8 * n_values + _CRC.size
    if len(data) < expected:
        raise BasisTruncatedError(f"file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise BasisChecksumError(f"file has {len(data) - expected} trailing bytes")
    (stored,) = _CRC.unpack_from(data, expected - _CRC.size)
    if zlib.crc32(data[:expected - _CRC.size]) & 0xFFFFFFFF != stored:
        raise BasisChecksumError(f"CRC mismatch in {path}")

    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=_F8, count=count, offset=offset).reshape(shape).astype(np.float64)
        arrays.append(arr)
        offset += 8 * count
    vectors, inner_vectors, a0, comps, load, provenance = arrays

    model = AffineCoefficientModel(
        abar=header["abar"], k=header["k"], amplitudes=tuple(header["amplitudes"]),
        t=header["t"], delta=header["delta"],
    )
    mesh = build_mesh(header["grid_n"], header["k"])
    label = header["load_label"]
    f = float(label.split(":", 1)[1]) if label.startswith("constant:") else 1.0
    op = assemble(mesh, model, f)
    if op.n_h != header["n_h"]:
        raise BasisFileError(f"rebuilt mesh has {op.n_h} unknowns, file records {header['n_h']}")
    if not label.startswith("constant:"):
        logger.warning("basis %s was built with a custom load; operator not attached", path)
        op_attached = None
    else:
        op_attached = op
    return ReducedBasis(
        inner=op.inner,
        vectors=vectors,
        inner_vectors=inner_vectors,
        reduced_a0=a0,
        reduced_components=comps,
        reduced_load=load,
        provenance=tuple(provenance[i] for i in range(provenance.shape[0])),
        operator=op_attached,
        metadata=dict(header.get("metadata") or {}),
    )
