"""Mesh data model, OBJ/PLY I/O, rigid poses, cameras and symmetry helpers."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from ._raster import covered_pixels

NUM_PARTS = 18
BACKGROUND_PART = 18

PART_NAMES = (
    "hood", "front_window", "roof", "rear_window", "trunk",
    "front_face", "rear_face",
    "left_front_fender", "left_door", "left_rear_fender",
    "right_front_fender", "right_door", "right_rear_fender",
    "chassis",
    "front_left_tire", "front_right_tire", "rear_left_tire", "rear_right_tire",
)
TIRE_PARTS = (14, 15, 16, 17)

ATLAS_CHECK_RESOLUTION = 256


class MeshError(ValueError):
    """Base class for mesh validation and parsing failures."""

    code = "mesh"


class MeshParseError(MeshError):
    code = "parse"


class IndexRangeError(MeshError):
    code = "index_range"


class UnknownGroupError(MeshError):
    code = "unknown_group"


class AtlasOverlapError(MeshError):
    code = "atlas_overlap"


class DegenerateFaceError(MeshError):
    code = "degenerate_face"


class IsolatedVertexError(MeshError):
    code = "isolated_vertex"

    def __init__(self, index: int):
        super().__init__(f"vertex {index} belongs to no face")
        self.index = index


class PartId(int):
    """Integer part label; 0-17 are vehicle parts, 18 is background."""

    def __new__(cls, value: int):
        value = int(value)
        if not 0 <= value <= BACKGROUND_PART:
            raise ValueError(f"part id {value} outside [0, {BACKGROUND_PART}]")
        return super().__new__(cls, value)

    @property
    def is_background(self) -> bool:
        return self == BACKGROUND_PART

    @property
    def name(self) -> str:
        return "background" if self.is_background else PART_NAMES[self]


# --------------------------------------------------------------------------
# rotations


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("quaternion has zero or non-finite norm")
    q = q / n
    # canonical hemisphere keeps equality checks stable
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def rotvec_to_quat(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    if theta < 1e-12:
        # second-order expansion, exact to machine precision here
        return quat_normalize(np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * omega]))
    axis = omega / theta
    return quat_normalize(np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis]))


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * q[1:] / s


def nearest_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return quat_to_matrix(rotvec_to_quat(axis / np.linalg.norm(axis) * angle))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from the canonical model frame to the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @cached_property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.matrix.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(quat_multiply(self.rotation, other.rotation),
                    self.matrix @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(quat_to_matrix(q) @ self.translation))

    def retract(self, omega, tau) -> "Pose":
        """Right-multiplied tangent update ``R·Exp(omega), T + tau``."""
        return Pose(quat_multiply(self.rotation, rotvec_to_quat(omega)), self.translation + tau)

    def angle_to(self, other: "Pose") -> float:
        d = abs(float(np.dot(self.rotation, other.rotation)))
        return 2.0 * float(np.arccos(min(1.0, d)))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(d["rotation"], d["translation"])


def vehicle_pose(yaw: float, translation) -> Pose:
    """Pose for a model frame with y up, seen by a y-down camera.

    ``yaw`` rotates the vehicle about the camera's vertical axis.
    """
    flip = np.diag([1.0, -1.0, -1.0])
    return Pose.from_matrix(rotation_about([0, 1, 0], yaw) @ flip, translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def default(cls, width: int = 640, height: int = 480, fov_scale: float = 1.0) -> "CameraIntrinsics":
        f = 0.9 * width * fov_scale
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True)
class SymmetryPlane:
    """Plane ``{x : n·x = offset}`` with unit normal ``n``."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset))

    def reflect(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        d = p @ self.normal - self.offset
        return p - 2.0 * d[..., None] * self.normal


# --------------------------------------------------------------------------
# mesh


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with per-face part labels and per-corner UVs.

    Arrays are copied and frozen on construction. ``corner_uv`` has shape
    ``(F, 3, 2)`` so part seams in the atlas are representable.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_part: np.ndarray
    corner_uv: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        p = np.asarray(self.face_part)
        uv = np.asarray(self.corner_uv, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if not np.issubdtype(f.dtype, np.integer):
            raise MeshError("face indices must be integers")
        f = f.astype(np.int64)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            bad = int(f.max()) if f.max() >= len(v) else int(f.min())
            raise IndexRangeError(f"face references vertex {bad} but mesh has {len(v)} vertices")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise DegenerateFaceError("face with repeated vertex index")
        if p.shape != (len(f),):
            raise MeshError("face_part must have one entry per face")
        if len(p) and (p.min() < 0 or p.max() >= NUM_PARTS):
            raise MeshError(f"face part ids must lie in [0, {NUM_PARTS - 1}]")
        if uv.shape != (len(f), 3, 2):
            raise MeshError(f"corner_uv must be (F, 3, 2), got {uv.shape}")
        if len(uv) and (uv.min() < 0 or uv.max() > 1 or not np.all(np.isfinite(uv))):
            raise MeshError("uv coordinates must lie in [0, 1]")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertices must be finite")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        object.__setattr__(self, "face_part", _readonly(p.astype(np.int64)))
        object.__setattr__(self, "corner_uv", _readonly(uv))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices, name: str | None = None) -> "Mesh":
        return Mesh(vertices, self.faces, self.face_part, self.corner_uv, name or self.name)

    def same_topology(self, other: "Mesh") -> bool:
        return (self.n_vertices == other.n_vertices
                and np.array_equal(self.faces, other.faces)
                and np.array_equal(self.face_part, other.face_part)
                and np.array_equal(self.corner_uv, other.corner_uv))

    def part_vertices(self, part: int) -> np.ndarray:
        return np.unique(self.faces[self.face_part == part])

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``i < j``."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e))
        A = sparse.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
        return A.tocsr()

    @cached_property
    def uniform_laplacian(self) -> sparse.csr_matrix:
        """Sparse operator mapping vertices to ``v_i - mean(one-ring)``."""
        A = self.adjacency
        deg = np.asarray(A.sum(axis=1)).ravel()
        isolated = np.nonzero(deg == 0)[0]
        if len(isolated):
            raise IsolatedVertexError(int(isolated[0]))
        return (sparse.identity(self.n_vertices, format="csr") - sparse.diags(1.0 / deg) @ A).tocsr()

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def mesh_gradient(mesh: Mesh) -> np.ndarray:
    """Uniform-Laplacian differential coordinates, one 3-vector per vertex."""
    return mesh.uniform_laplacian @ mesh.vertices


def uv_to_texel(uv, resolution: int) -> np.ndarray:
    """Map atlas UV to texel coordinates (texel centers at integers, row 0 at v=1)."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * resolution - 0.5, (1.0 - uv[..., 1]) * resolution - 0.5], axis=-1)


def texel_to_uv(col, row, resolution: int) -> np.ndarray:
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    return np.stack([(col + 0.5) / resolution, 1.0 - (row + 0.5) / resolution], axis=-1)


def rasterize_atlas(mesh: Mesh, resolution: int):
    """Rasterize the UV atlas; returns ``(face_index, bary)`` images.

    Texels not covered by any face carry face index -1. Where charts overlap
    the last face written wins; use :func:`check_atlas` to detect overlap.
    """
    face_img = np.full((resolution, resolution), -1, dtype=np.int64)
    bary_img = np.zeros((resolution, resolution, 3))
    tri = uv_to_texel(mesh.corner_uv, resolution)
    for fid, px, py, bary in covered_pixels(tri, resolution, resolution):
        face_img[py, px] = fid
        bary_img[py, px] = bary
    return face_img, bary_img


def check_atlas(mesh: Mesh, resolution: int = ATLAS_CHECK_RESOLUTION) -> None:
    """Raise :class:`AtlasOverlapError` if two parts claim the same texel."""
    owner = np.full(resolution * resolution, -1, dtype=np.int64)
    tri = uv_to_texel(mesh.corner_uv, resolution)
    for fid, px, py, _ in covered_pixels(tri, resolution, resolution):
        flat = py * resolution + px
        part = mesh.face_part[fid]
        order = np.argsort(flat, kind="stable")
        flat, part = flat[order], part[order]
        # conflicts inside this chunk
        same = flat[1:] == flat[:-1]
        if np.any(same & (part[1:] != part[:-1])):
            raise AtlasOverlapError("UV atlas regions of different parts overlap")
        prev = owner[flat]
        if np.any((prev >= 0) & (prev != part)):
            raise AtlasOverlapError("UV atlas regions of different parts overlap")
        owner[flat] = part


# --------------------------------------------------------------------------
# file formats

_GROUP_RE = re.compile(r"^part_(\d{2})$")


def load_mesh(path, check_uv_overlap: bool = True) -> Mesh:
    """Read the OBJ-with-part-groups format (``v``, ``vt``, ``g part_NN``, ``f v/vt``)."""
    path = Path(path)
    verts, uvs, faces, face_uv, parts = [], [], [], [], []
    current = None
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise MeshParseError(f"{path}: not a text file") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) != 3:
                    raise ValueError("expected 3 coordinates")
                verts.append([float(x) for x in rest])
            elif tag == "vt":
                if len(rest) != 2:
                    raise ValueError("expected 2 texture coordinates")
                uvs.append([float(x) for x in rest])
            elif tag == "g":
                m = _GROUP_RE.match(rest[0]) if len(rest) == 1 else None
                if m is None or int(m.group(1)) >= NUM_PARTS:
                    raise UnknownGroupError(f"{path}:{lineno}: unknown group {' '.join(rest)!r}")
                current = int(m.group(1))
            elif tag == "f":
                if current is None:
                    raise UnknownGroupError(f"{path}:{lineno}: face outside a part group")
                if len(rest) != 3:
                    raise ValueError("only triangles are supported")
                vi, ti = [], []
                for corner in rest:
                    a, b = corner.split("/")
                    vi.append(int(a) - 1)
                    ti.append(int(b) - 1)
                faces.append(vi)
                face_uv.append(ti)
                parts.append(current)
            else:
                raise ValueError(f"unsupported record {tag!r}")
        except MeshError:
            raise
        except (ValueError, IndexError) as exc:
            raise MeshParseError(f"{path}:{lineno}: {exc}") from exc
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    face_uv = np.array(face_uv, dtype=np.int64).reshape(-1, 3)
    uvs = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    if len(face_uv) and (face_uv.min() < 0 or face_uv.max() >= len(uvs)):
        raise IndexRangeError(f"{path}: texture index out of range")
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise IndexRangeError(f"{path}: face references vertex {int(faces.max()) + 1} "
                              f"but file has {len(verts)} vertices")
    mesh = Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), faces, np.array(parts, dtype=np.int64),
                uvs[face_uv] if len(faces) else np.zeros((0, 3, 2)), name=path.stem)
    if check_uv_overlap:
        check_atlas(mesh)
    return mesh


def mesh_to_obj(mesh: Mesh) -> str:
    lines = [f"# {mesh.name}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    flat_uv = mesh.corner_uv.reshape(-1, 2)
    uniq, inverse = np.unique(flat_uv, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    lines += [f"vt {u!r} {v!r}" for u, v in uniq.tolist()]
    current = None
    for (a, b, c), (ta, tb, tc), part in zip(mesh.faces.tolist(), inverse.tolist(), mesh.face_part.tolist()):
        if part != current:
            lines.append(f"g part_{part:02d}")
            current = part
        lines.append(f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}")
    return "\n".join(lines) + "\n"


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(mesh_to_obj(mesh))


def obj_from_text(text: str, name: str = "mesh") -> Mesh:
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / f"{name}.obj"
        p.write_text(text)
        return load_mesh(p, check_uv_overlap=False)


def save_ply(mesh: Mesh, path) -> None:
    """ASCII PLY with an integer ``part`` face property."""
    lines = [
        "ply", "format ascii 1.0", f"comment {mesh.name}",
        f"element vertex {mesh.n_vertices}",
        "property double x", "property double y", "property double z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices", "property int part",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c} {p}" for (a, b, c), p in zip(mesh.faces.tolist(), mesh.face_part.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# symmetry


def mirror_pairs(points, plane: SymmetryPlane, tol: float):
    """Mutual nearest pairs between ``points`` and their reflections.

    Returns ``(pairs, unpaired)``: ``pairs`` is ``(K, 2)`` and closed under
    swapping columns; ``unpaired`` lists indices with no partner.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    tree = cKDTree(pts)
    dist, j = tree.query(plane.reflect(pts), distance_upper_bound=tol)
    i = np.arange(len(pts))
    hit = np.isfinite(dist) & (dist <= tol)
    partner = np.where(hit, j, -1)
    safe = np.where(hit, partner, 0)
    mutual = hit & (partner[safe] == i)
    pairs = np.stack([i[mutual], partner[mutual]], axis=1).astype(np.int64)
    return pairs, i[~mutual]


def symmetry_map(mesh: Mesh, plane: SymmetryPlane, tol: float):
    """Vertex pairs ``(i, j)`` with ``reflect(v_i)`` within ``tol`` of ``v_j``."""
    return mirror_pairs(mesh.vertices, plane, tol)
