"""PCA deformable shape model: mean mesh plus scaled principal directions."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .mesh_core import Mesh, mesh_to_obj, obj_from_text

DEGENERATE_VARIANCE = 1e-12
_MAGIC = b"PCAB0001"


class ShapeModelError(ValueError):
    pass


class TopologyMismatchError(ShapeModelError):
    pass


class DegenerateCovarianceError(ShapeModelError):
    pass


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """``mean`` is ``(3N,)``, ``components`` ``(r, 3N)`` orthonormal rows, ``stddevs`` ``(r,)``."""

    mean: np.ndarray
    components: np.ndarray
    stddevs: np.ndarray
    topology: Mesh

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        comps = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        sd = np.asarray(self.stddevs, dtype=np.float64).ravel()
        if mean.size != 3 * self.topology.n_vertices:
            raise ShapeModelError("mean length must be 3 x vertex count")
        if comps.shape != (sd.size, mean.size):
            raise ShapeModelError("components must be (r, 3N)")
        if np.any(sd <= 0) or np.any(np.diff(sd) > 0):
            raise ShapeModelError("stddevs must be positive and sorted descending")
        for name, a in (("mean", mean), ("components", comps), ("stddevs", sd)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def r(self) -> int:
        return self.stddevs.size

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices

    @cached_property
    def deformation(self) -> np.ndarray:
        """``(3N, r)`` matrix whose column k is ``stddev_k * component_k``."""
        return self.components.T * self.stddevs

    @cached_property
    def mean_mesh(self) -> Mesh:
        return self.topology.with_vertices(self.mean.reshape(-1, 3), name="mean")


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).ravel()
        if not np.all(np.isfinite(s)):
            raise ShapeModelError("shape coefficients must be finite")
        object.__setattr__(self, "s", s)

    @classmethod
    def zeros(cls, r: int) -> "ShapeCoefficients":
        return cls(np.zeros(r))

    def __len__(self):
        return self.s.size


def build_pca(meshes: list[Mesh], r: int) -> PcaBasis:
    """Top-``r`` principal directions of a set of meshes sharing one topology."""
    if len(meshes) < 2:
        raise ShapeModelError("need at least two meshes")
    ref = meshes[0]
    for m in meshes[1:]:
        if not m.same_topology(ref):
            raise TopologyMismatchError(f"mesh {m.name!r} does not share the topology of {ref.name!r}")
    X = np.stack([m.vertices.ravel() for m in meshes])
    if not 1 <= r <= min(len(meshes) - 1, X.shape[1]):
        raise ShapeModelError(f"r={r} outside [1, {min(len(meshes) - 1, X.shape[1])}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    # thin SVD: samples << dimensions
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    var = S[:r] ** 2 / len(meshes)
    if np.any(var < DEGENERATE_VARIANCE):
        raise DegenerateCovarianceError(
            f"degenerate covariance: component {int(np.argmax(var < DEGENERATE_VARIANCE)) + 1} "
            f"has variance {var.min():.3g}")
    comps = Vt[:r]
    # deterministic sign: largest-magnitude entry positive
    sign = np.sign(comps[np.arange(r), np.abs(comps).argmax(axis=1)])
    comps = comps * sign[:, None]
    topo = ref.with_vertices(mean.reshape(-1, 3), name="mean")
    return PcaBasis(mean, comps, np.sqrt(var), topo)


def _coeff_vector(basis: PcaBasis, coeffs) -> np.ndarray:
    s = coeffs.s if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs, dtype=np.float64).ravel()
    if s.size != basis.r:
        raise ShapeModelError(f"expected {basis.r} coefficients, got {s.size}")
    return s


def synthesize_vertices(basis: PcaBasis, coeffs) -> np.ndarray:
    s = _coeff_vector(basis, coeffs)
    return (basis.mean + basis.deformation @ s).reshape(-1, 3)


def synthesize(basis: PcaBasis, coeffs, name: str = "synthesized") -> Mesh:
    return basis.topology.with_vertices(synthesize_vertices(basis, coeffs), name=name)


def project(basis: PcaBasis, mesh: Mesh) -> ShapeCoefficients:
    """Least-squares coefficients of ``mesh`` in the basis (standard-deviation units)."""
    if not mesh.same_topology(basis.topology):
        raise TopologyMismatchError("mesh topology does not match the basis")
    return ShapeCoefficients(basis.components @ (mesh.vertices.ravel() - basis.mean) / basis.stddevs)


def shape_jacobian(basis: PcaBasis, vertex: int) -> np.ndarray:
    """``(3, r)`` derivative of one synthesized vertex w.r.t. the coefficients."""
    if not 0 <= vertex < basis.n_vertices:
        raise IndexError(f"vertex {vertex} out of range [0, {basis.n_vertices})")
    return basis.deformation[3 * vertex:3 * vertex + 3]


def save_basis(basis: PcaBasis, path) -> None:
    """Binary container: magic, (N, r), mean, stddevs, components, embedded OBJ topology."""
    obj = mesh_to_obj(basis.topology).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", basis.n_vertices, basis.r))
        fh.write(basis.mean.astype("<f8").tobytes())
        fh.write(basis.stddevs.astype("<f8").tobytes())
        fh.write(basis.components.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", len(obj)))
        fh.write(obj)


def load_basis(path) -> PcaBasis:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ShapeModelError(f"{path}: not a basis file")
    n, r = struct.unpack_from("<QQ", data, 8)
    off = 24
    mean = np.frombuffer(data, "<f8", 3 * n, off)
    off += 24 * n
    sd = np.frombuffer(data, "<f8", r, off)
    off += 8 * r
    comps = np.frombuffer(data, "<f8", 3 * n * r, off).reshape(r, 3 * n)
    off += 24 * n * r
    (size,) = struct.unpack_from("<Q", data, off)
    topo = obj_from_text(data[off + 8:off + 8 + size].decode(), name="mean")
    return PcaBasis(mean.copy(), comps.copy(), sd.copy(), topo)
