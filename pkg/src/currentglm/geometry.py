"""Oriented triangle meshes and their per-triangle current descriptors.

The area vector of a triangle ``(a, b, c)`` is the raw cross product
``(b - a) x (c - a)``.  Its magnitude is *twice* the triangle area.  This
convention is used consistently everywhere in the package, so inner
products between currents are all scaled by the same factor of four.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MeshFormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriMesh:
    """Oriented triangulated surface.

    Parameters
    ----------
    vertices : (V, 3) float array
    triangles : (T, 3) int array
        Ordered vertex indices; the order carries the orientation.
    label : str
        Surface identifier.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError(f"vertices must have shape (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise DataError(f"triangles must have shape (T, 3), got {t.shape}")
        if len(t) == 0:
            raise DataError("mesh must contain at least one triangle")
        if t.min() < 0 or t.max() >= len(v):
            raise DataError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise DataError("non-finite vertex coordinates")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def flipped(self):
        """Same surface with every face orientation reversed."""
        return TriMesh(self.vertices, self.triangles[:, [0, 2, 1]], self.label)


@dataclass(frozen=True)
class TriangleDescriptors:
    """Centers and area vectors of a mesh, one row per triangle in face order."""

    centers: np.ndarray
    area_vectors: np.ndarray
    n_degenerate: int = 0
    label: str = field(default="")

    def __len__(self):
        return len(self.centers)


def triangle_descriptors(mesh: TriMesh) -> TriangleDescriptors:
    """Compute ``x_j = (a+b+c)/3`` and ``tau_j = (b-a) x (c-a)`` per face."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    centers = (a + b + c) / 3.0
    tau = np.cross(b - a, c - a)
    n_degenerate = int(np.count_nonzero(~np.any(tau != 0.0, axis=1)))
    if n_degenerate:
        log.warning("%s: %d degenerate triangle(s) with zero area vector",
                    mesh.label or "mesh", n_degenerate)
    return TriangleDescriptors(centers, tau, n_degenerate, mesh.label)


# --------------------------------------------------------------------------
# I/O


def _data_lines(lines):
    """Yield (lineno, tokens) for non-blank, non-comment lines."""
    for lineno, raw in enumerate(lines, start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            yield lineno, s.split()


def _parse_off(lines, path):
    it = _data_lines(lines)
    try:
        lineno, tok = next(it)
    except StopIteration:
        raise MeshFormatError("empty file", path, 1) from None
    if tok[0] != "OFF":
        raise MeshFormatError(f"expected 'OFF' header, got {tok[0]!r}", path, lineno)
    tok = tok[1:]
    if not tok:
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshFormatError("missing counts line", path, lineno) from None
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (IndexError, ValueError):
        raise MeshFormatError("malformed counts line", path, lineno) from None
    if nv < 0 or nf < 0:
        raise MeshFormatError("negative element count", path, lineno)

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshFormatError(
                f"header declares {nv} vertices but only {i} present", path, lineno
            ) from None
        try:
            verts[i] = [float(x) for x in tok[:3]]
        except ValueError:
            raise MeshFormatError("malformed vertex line", path, lineno) from None
        if len(tok) < 3:
            raise MeshFormatError("vertex line needs 3 coordinates", path, lineno)

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise MeshFormatError(
                f"header declares {nf} faces but only {i} present", path, lineno
            ) from None
        try:
            k = int(tok[0])
            idx = [int(x) for x in tok[1:1 + k]]
        except ValueError:
            raise MeshFormatError("malformed face line", path, lineno) from None
        if k != 3:
            raise MeshFormatError(f"non-triangular face with {k} vertices", path, lineno)
        if len(idx) != 3:
            raise MeshFormatError("face line has too few indices", path, lineno)
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshFormatError(f"face index out of range in {idx}", path, lineno)
        faces[i] = idx
    return verts, faces


def _parse_obj(lines, path):
    verts, faces, face_lines = [], [], []
    ignored = set()
    for lineno, tok in _data_lines(lines):
        kind = tok[0]
        if kind == "v":
            try:
                verts.append([float(x) for x in tok[1:4]])
            except ValueError:
                raise MeshFormatError("malformed vertex line", path, lineno) from None
            if len(tok) < 4:
                raise MeshFormatError("vertex line needs 3 coordinates", path, lineno)
        elif kind == "f":
            if len(tok) != 4:
                raise MeshFormatError(
                    f"non-triangular face with {len(tok) - 1} vertices", path, lineno)
            try:
                # 'f 1/2/3 ...' keeps only the position index
                idx = [int(x.split("/")[0]) for x in tok[1:]]
            except ValueError:
                raise MeshFormatError("malformed face line", path, lineno) from None
            faces.append(idx)
            face_lines.append(lineno)
        else:
            ignored.add(kind)
    if ignored:
        log.warning("%s: ignored OBJ directives %s", path, sorted(ignored))
    nv = len(verts)
    out = np.empty((len(faces), 3), dtype=np.int64)
    for i, (idx, lineno) in enumerate(zip(faces, face_lines)):
        # negative indices are relative in OBJ; not supported here
        if min(idx) < 1 or max(idx) > nv:
            raise MeshFormatError(f"face index out of range in {idx}", path, lineno)
        out[i] = [j - 1 for j in idx]
    return np.array(verts, dtype=float).reshape(-1, 3), out


def load_mesh(path, format=None, label=None) -> TriMesh:
    """Read an ASCII OFF or OBJ triangle mesh.

    Vertex order and face orientation are kept exactly as stored.  Any
    parsing problem raises :class:`MeshFormatError` carrying the line number.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).upper()
    if fmt not in ("OFF", "OBJ"):
        raise DataError(f"unsupported mesh format {fmt!r} for {path}")
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read mesh {path}: {e}") from e
    parse = _parse_off if fmt == "OFF" else _parse_obj
    verts, faces = parse(lines, str(path))
    if len(faces) == 0:
        raise MeshFormatError("mesh has no triangles", str(path))
    return TriMesh(verts, faces, label if label is not None else path.stem)


def format_off(mesh: TriMesh) -> str:
    rows = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
    rows += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    rows += ["3 %d %d %d" % tuple(t) for t in mesh.triangles]
    return "\n".join(rows) + "\n"


def write_off(mesh: TriMesh, path):
    """Write ``mesh`` as ASCII OFF; coordinates use round-trip float repr."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_off(mesh))
    os.replace(tmp, path)
