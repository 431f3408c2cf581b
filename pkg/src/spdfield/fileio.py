"""Binary and CSV persistence.

Binary layout
-------------
All binary files share one little-endian container::

    offset  size  content
    0       4     magic, one of b'RSET', b'KLB1', b'STFL', b'SMAP'
    4       2     format version (uint16, currently 1)
    6       2     number of arrays k (uint16)
    8       4     header length h in bytes (uint32)
    12      h     header, UTF-8 JSON with sorted keys
    12+h    ...   k arrays of float64, each in the order and shape listed
                  under ``"arrays"`` in the header
    end-4   4     CRC-32 of every preceding byte (uint32)

Arrays are stored in C order except the Stiefel point, which is stored
column-major.  Reading checks the magic, the version, the payload length
and the checksum before anything is returned.

CSV files use ``%.17g`` so that floats round-trip exactly and repeated
runs write identical bytes.
"""

import csv
import io
import json
import os
import struct
import zlib

import numpy as np

from . import klpce, matalg, sgalerkin
from .errors import DimensionError, InvalidInputError

VERSION = 1
_PREFIX = struct.Struct("<4sHHI")
_CRC = struct.Struct("<I")


class FormatError(InvalidInputError):
    """A file does not match its documented layout."""


def atomic_write(path, data):
    """Write bytes (or text) through a temporary file and rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def pack(magic, header, arrays, order="C"):
    """Container bytes for ``header`` (dict) and named float64 ``arrays``."""
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays]
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(_PREFIX.pack(magic, VERSION, len(arrays), len(text)))
    out.write(text)
    for _, a in arrays:
        out.write(np.asarray(a, dtype="<f8").tobytes(order=order))
    body = out.getvalue()
    return body + _CRC.pack(zlib.crc32(body))


def unpack(data, magic, order="C"):
    """Inverse of :func:`pack`: ``(header, {name: array})``."""
    if len(data) < _PREFIX.size + _CRC.size:
        raise FormatError("file is too short for the container header")
    tag, version, n_arr, h_len = _PREFIX.unpack_from(data)
    if tag != magic:
        raise FormatError(f"expected magic {magic!r}, found {tag!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch")
    pos = _PREFIX.size
    header = json.loads(body[pos:pos + h_len].decode("utf-8"))
    pos += h_len
    specs = header.pop("arrays")
    if len(specs) != n_arr:
        raise FormatError("array count in header does not match the prefix")
    arrays = {}
    for name, shape in specs:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + size > len(body):
            raise FormatError(f"payload ends inside array {name!r}")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=size // 8,
                                     offset=pos).reshape(shape, order=order).astype(np.float64)
        pos += size
    if pos != len(body):
        raise FormatError("trailing bytes after the last array")
    return header, arrays


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# --- realization sets -------------------------------------------------------

def save_realizations(path, rset):
    header = {"n": rset.n, "count": rset.count, "n_nodes": rset.n_nodes}
    atomic_write(path, pack(b"RSET", header, [("values", rset.values)]))


def load_realizations(path):
    header, arrays = unpack(_read(path), b"RSET")
    return klpce.RealizationSet(arrays["values"], header["n"])


# --- KL bases -----------------------------------------------------------------

def save_kl(path, basis):
    header = {"n": basis.n, "m": basis.m, "mesh_digest": basis.mesh_digest.hex()}
    arrays = [("mean", basis.mean), ("sigma", basis.sigma), ("modes", basis.modes),
              ("weights", basis.weights)]
    if basis.spectrum is not None:
        arrays.append(("spectrum", basis.spectrum))
    atomic_write(path, pack(b"KLB1", header, arrays))


def load_kl(path, mesh=None):
    """Read a KL basis; with ``mesh`` given, its digest must match."""
    header, arrays = unpack(_read(path), b"KLB1")
    digest = bytes.fromhex(header["mesh_digest"])
    if mesh is not None and digest and digest != mesh.digest:
        raise FormatError("KL basis was computed on a different mesh")
    return klpce.KLBasis(arrays["mean"], arrays["sigma"], arrays["modes"], arrays["weights"],
                         header["n"], digest, arrays.get("spectrum"))


# --- Stiefel points -----------------------------------------------------------

def save_stiefel(path, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise DimensionError("a Stiefel point is a 2-d array")
    header = {"N": y.shape[0], "m": y.shape[1]}
    atomic_write(path, pack(b"STFL", header, [("y", y)], order="F"))


def load_stiefel(path):
    header, arrays = unpack(_read(path), b"STFL", order="F")
    y = arrays["y"]
    if y.shape != (header["N"], header["m"]):
        raise FormatError("Stiefel header does not match the payload")
    return np.ascontiguousarray(y)


# --- solution maps ------------------------------------------------------------

def save_map(path, smap):
    """Persist a dense or canonical solution map.

    The bound ``gamma`` needed by truncated or weighted maps is a function
    and is not stored; :func:`load_map` takes it as an argument.
    """
    header = {
        "kind": smap.kind,
        "basis_y": smap.basis.basis_y.descriptor(),
        "basis_z": smap.basis.basis_z.descriptor(),
        "tau": smap.tau,
        "modifier": smap.modifier,
        "mesh_digest": smap.mesh.digest.hex() if smap.mesh is not None else "",
    }
    if smap.kind == "dense":
        arrays = [("coeffs", smap.coeffs)]
    elif smap.kind == "cp":
        arrays = list(zip(("wx", "wy", "wz"), smap.factors))
    else:
        raise InvalidInputError(f"unknown map kind {smap.kind!r}")
    atomic_write(path, pack(b"SMAP", header, arrays))


def _basis_from(desc):
    return klpce.ChaosBasis(desc["n_germ"], desc["degree"], desc["n_terms"],
                            desc["include_constant"], desc["family"], desc["scale"])


def load_map(path, mesh=None, gamma_fn=None):
    header, arrays = unpack(_read(path), b"SMAP")
    if mesh is not None and header["mesh_digest"] and \
            bytes.fromhex(header["mesh_digest"]) != mesh.digest:
        raise FormatError("solution map was built on a different mesh")
    basis = sgalerkin.ProductBasis.from_parts(_basis_from(header["basis_y"]),
                                              _basis_from(header["basis_z"]))
    if header["kind"] == "dense":
        return sgalerkin.SolutionMap("dense", basis, coeffs=arrays["coeffs"], mesh=mesh,
                                     tau=header["tau"], modifier=header["modifier"],
                                     gamma_fn=gamma_fn)
    factors = (arrays["wx"], arrays["wy"], arrays["wz"])
    return sgalerkin.SolutionMap("cp", basis, factors=factors, mesh=mesh, tau=header["tau"],
                                 modifier=header["modifier"], gamma_fn=gamma_fn)


# --- CSV ----------------------------------------------------------------------

def format_float(x):
    return "%.17g" % x


def csv_text(header, rows):
    """CSV text with ``%.17g`` floats and ``\\n`` line endings."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v
                         for v in row])
    return out.getvalue()


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))


def write_matrix_csv(path, mat, prefix="c"):
    """A 2-d float array with columns ``prefix0, prefix1, ...``."""
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    write_csv(path, [f"{prefix}{j}" for j in range(mat.shape[1])], mat.tolist())


def read_matrix_csv(path):
    """Float array from a CSV with one header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path} is empty")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return data.reshape(-1, len(rows[0]))


def field_header(dim, n):
    coords = [f"x{k}" for k in range(dim)]
    entries = [f"k{i}{j}" for i in range(n) for j in range(i, n)]
    return ["node"] + coords + ["n"] + entries


def write_field_csv(path, mesh, mats):
    """One matrix field snapshot: node id, coordinates, ``n`` and the upper
    triangle of each node matrix, row by row."""
    mats = np.asarray(mats, dtype=np.float64)
    n = mats.shape[-1]
    if mats.shape != (mesh.n_nodes, n, n):
        raise DimensionError(f"expected ({mesh.n_nodes}, n, n) node matrices, got {mats.shape}")
    iu = np.triu_indices(n)
    upper = mats[:, iu[0], iu[1]]
    rows = [[i] + [float(c) for c in mesh.nodes[i]] + [n] + [float(v) for v in upper[i]]
            for i in range(mesh.n_nodes)]
    write_csv(path, field_header(mesh.dim, n), rows)


def read_field_csv(path):
    """``(node_ids, coords, mats)`` from :func:`write_field_csv` output."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    dim = sum(1 for h in head if h.startswith("x"))
    body = [r for r in rows[1:] if r]
    if not body:
        return np.zeros(0, dtype=np.int64), np.zeros((0, dim)), np.zeros((0, 0, 0))
    n = int(body[0][1 + dim])
    if len(head) != 2 + dim + matalg.n_sym(n):
        raise FormatError("field CSV header does not match the matrix size")
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    coords = np.array([[float(v) for v in r[1:1 + dim]] for r in body])
    upper = np.array([[float(v) for v in r[2 + dim:]] for r in body])
    iu = np.triu_indices(n)
    mats = np.zeros((len(body), n, n))
    mats[:, iu[0], iu[1]] = upper
    mats[:, iu[1], iu[0]] = upper
    return ids, coords, mats
