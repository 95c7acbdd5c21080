"""Template-to-target alignment: ARAP body deformation plus per-tire similarity ICP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .mesh_core import TIRE_PARTS, Mesh, matrix_to_quat, quat_to_matrix


class AlignmentError(ValueError):
    pass


class RankDeficientError(AlignmentError):
    pass


@dataclass(frozen=True)
class DeformationConstraints:
    indices: np.ndarray
    targets: np.ndarray
    weight: float = 1e3

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        tgt = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(idx) != len(tgt):
            raise AlignmentError("one target point per handle index")
        if not self.weight > 0:
            raise AlignmentError("handle weight must be positive")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "targets", tgt)

    @classmethod
    def from_pairs(cls, handles, weight: float = 1e3) -> "DeformationConstraints":
        """Build from ``(vertex index, target point)`` pairs."""
        handles = list(handles)
        return cls([i for i, _ in handles], [p for _, p in handles], weight)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise AlignmentError("scale must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.matrix.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        R = self.matrix.T
        return SimilarityTransform(matrix_to_quat(R), -(R @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``."""
        R = self.matrix @ other.matrix
        return SimilarityTransform(matrix_to_quat(R), self.apply(other.translation), self.scale * other.scale)


def umeyama(src, dst, with_scale: bool = True):
    """Closed-form least-squares similarity with ``dst ≈ c R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (xs ** 2).sum() / len(src)
    c = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    return c, R, mu_d - c * R @ mu_s


# --------------------------------------------------------------------------
# ARAP


def _neighbors(mesh: Mesh):
    e = mesh.edges
    return np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]]


def arap_energy(rest: Mesh, deformed, rotations=None) -> float:
    """``sum_i sum_{j in N(i)} |(v'_i - v'_j) - R_i (v_i - v_j)|^2``.

    Without ``rotations`` each ``R_i`` is the optimal local fit, which gives
    the energy of the deformed shape itself.
    """
    v = rest.vertices
    vd = np.asarray(deformed, dtype=np.float64)
    i, j = _neighbors(rest)
    if rotations is None:
        rotations = _fit_rotations(rest, vd)
    e_rest = v[i] - v[j]
    e_def = vd[i] - vd[j]
    diff = e_def - np.einsum("kab,kb->ka", rotations[i], e_rest)
    return float((diff ** 2).sum())


def _fit_rotations(rest: Mesh, deformed) -> np.ndarray:
    v = rest.vertices
    i, j = _neighbors(rest)
    e_rest = v[i] - v[j]
    e_def = deformed[i] - deformed[j]
    S = np.zeros((rest.n_vertices, 3, 3))
    np.add.at(S, i, np.einsum("ka,kb->kab", e_rest, e_def))
    U, _, Vt = np.linalg.svd(S)
    R = np.einsum("kba,kcb->kac", Vt, U)  # V U^T
    bad = np.linalg.det(R) < 0
    if np.any(bad):
        U2 = U[bad].copy()
        U2[:, :, 2] *= -1
        R[bad] = np.einsum("kba,kcb->kac", Vt[bad], U2)
    return R


def _check_handles(mesh: Mesh, cons: DeformationConstraints):
    if len(cons.indices) and (cons.indices.min() < 0 or cons.indices.max() >= mesh.n_vertices):
        raise AlignmentError("handle index out of range")
    pts = mesh.vertices[np.unique(cons.indices)]
    if len(pts) < 3:
        raise RankDeficientError("need at least 3 distinct handle vertices")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise RankDeficientError("handles are collinear")
    ncomp, labels = connected_components(mesh.adjacency, directed=False)
    covered = np.zeros(ncomp, dtype=bool)
    covered[labels[cons.indices]] = True
    if not covered.all():
        raise RankDeficientError(f"{int((~covered).sum())} connected component(s) carry no handle; "
                                 "the global system is rank-deficient")


def arap_deform(mesh: Mesh, constraints: DeformationConstraints, iterations: int = 10,
                initial=None, return_history: bool = False):
    """As-rigid-as-possible deformation with soft (quadratic) handle constraints.

    Starts from ``initial`` (default: the best rigid fit of the mesh onto the
    handles) and alternates per-vertex rotation fits with one sparse global
    solve. The total objective ``ARAP + weight * handle error`` never increases.
    With ``return_history`` also returns that objective after every iteration,
    the first entry being the starting state.
    """
    if iterations < 1:
        raise AlignmentError("iterations must be at least 1")
    _check_handles(mesh, constraints)
    v = mesh.vertices
    n = mesh.n_vertices
    idx, tgt, w = constraints.indices, constraints.targets, constraints.weight
    if initial is None:
        c, R, t = umeyama(v[idx], tgt, with_scale=False)
        cur = v @ R.T + t
    else:
        cur = np.array(initial, dtype=np.float64)

    i, j = _neighbors(mesh)
    A = mesh.adjacency
    deg = np.asarray(A.sum(axis=1)).ravel()
    h = np.zeros(n)
    np.add.at(h, idx, 1.0)
    rhs_h = np.zeros((n, 3))
    np.add.at(rhs_h, idx, w * tgt)
    system = (2.0 * (sparse.diags(2.0 * deg) - 2.0 * A) + sparse.diags(2.0 * w * h)).tocsc()
    try:
        lu = splu(system)
    except RuntimeError as exc:
        raise RankDeficientError(str(exc)) from exc

    def objective(x, rots):
        hv = ((x[idx] - tgt) ** 2).sum()
        return arap_energy(mesh, x, rots) + w * hv

    rots = _fit_rotations(mesh, cur)
    history = [objective(cur, rots)]
    e_rest = v[i] - v[j]
    for _ in range(iterations):
        # global: 2 * sum_j [2 (v'_i - v'_j) - (R_i + R_j) e_ij] + 2 w (v'_i - c_i) = 0
        b = np.zeros((n, 3))
        np.add.at(b, i, np.einsum("kab,kb->ka", rots[i] + rots[j], e_rest))
        cur = lu.solve(2.0 * b + 2.0 * rhs_h)
        rots = _fit_rotations(mesh, cur)
        history.append(objective(cur, rots))
    out = mesh.with_vertices(cur, name=mesh.name)
    return (out, history) if return_history else out


# --------------------------------------------------------------------------
# ICP


def rigid_icp(source: Mesh | np.ndarray, target: Mesh | np.ndarray, max_iters: int = 50,
              with_scale: bool = True, tol: float = 1e-12) -> SimilarityTransform:
    """Nearest-neighbour matching alternated with closed-form similarity fits.

    Returns the transform with the lowest mean matched distance seen; the
    residual and iteration count ride along on the result.
    """
    src = source.vertices if isinstance(source, Mesh) else np.asarray(source, dtype=np.float64)
    dst = target.vertices if isinstance(target, Mesh) else np.asarray(target, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise AlignmentError("ICP needs non-empty point sets")
    tree = cKDTree(dst)
    # start by matching centroids and spreads
    c0 = np.sqrt(((dst - dst.mean(0)) ** 2).sum(1).mean() / max(((src - src.mean(0)) ** 2).sum(1).mean(),
                                                               1e-300)) if with_scale else 1.0
    T = SimilarityTransform(translation=dst.mean(0) - c0 * src.mean(0), scale=c0)
    best, best_res = T, np.inf
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        moved = T.apply(src)
        d, nn = tree.query(moved)
        res = float(d.mean())
        if res < best_res:
            best, best_res = T, res
        if res <= tol or (np.isfinite(prev) and prev - res <= tol * max(prev, 1.0)):
            break
        prev = res
        c, R, t = umeyama(src, dst[nn], with_scale)
        T = SimilarityTransform(matrix_to_quat(R), t, c)
    moved = T.apply(src)
    res = float(tree.query(moved)[0].mean())
    if res < best_res:
        best, best_res = T, res
    return SimilarityTransform(best.rotation, best.translation, best.scale, best_res, it)


# --------------------------------------------------------------------------
# template alignment


@dataclass(frozen=True)
class AlignConfig:
    arap_iterations: int = 10
    handle_weight: float = 1e3
    prune_factor: float = 3.0
    passes: int = 2
    icp_iterations: int = 50


def _nearest_handles(points, target_pts, prune_factor):
    d, nn = cKDTree(target_pts).query(points)
    med = np.median(d)
    keep = d <= prune_factor * med if med > 0 else np.ones(len(d), dtype=bool)
    return keep, target_pts[nn]


def align_to_target(template: Mesh, target: Mesh, config: AlignConfig = AlignConfig()) -> Mesh:
    """Deform the template onto ``target`` while keeping its topology, parts and UVs.

    Body parts go through two ARAP passes (forward nearest points, then
    refreshed forward+backward correspondences); each tire is moved by its own
    similarity ICP so it stays circular.
    """
    tpl_parts = set(np.unique(template.face_part).tolist())
    if not set(TIRE_PARTS) <= tpl_parts:
        raise AlignmentError("template lacks tire parts")
    tire_faces = np.isin(template.face_part, TIRE_PARTS)
    body_vid = np.unique(template.faces[~tire_faces])
    tgt_body_faces = ~np.isin(target.face_part, TIRE_PARTS)
    tgt_body = target.vertices[np.unique(target.faces[tgt_body_faces])] if tgt_body_faces.any() \
        else target.vertices

    # body as its own mesh so ARAP never touches the tires
    remap = -np.ones(template.n_vertices, dtype=np.int64)
    remap[body_vid] = np.arange(len(body_vid))
    body = Mesh(template.vertices[body_vid], remap[template.faces[~tire_faces]],
                template.face_part[~tire_faces], template.corner_uv[~tire_faces], name="body")

    # coarse start: per-axis bounding-box normalization onto the target body
    lo, hi = body.vertices.min(0), body.vertices.max(0)
    tlo, thi = tgt_body.min(0), tgt_body.max(0)
    scale = np.where(hi - lo > 0, (thi - tlo) / np.where(hi - lo > 0, hi - lo, 1.0), 1.0)
    current = (body.vertices - (lo + hi) / 2) * scale + (tlo + thi) / 2

    for p in range(max(config.passes, 1)):
        keep, fwd = _nearest_handles(current, tgt_body, config.prune_factor)
        targets_sum = np.where(keep[:, None], fwd, 0.0)
        counts = keep.astype(np.float64)
        if p > 0:
            # backward correspondences: every target point pulls its nearest deformed vertex
            d, nn = cKDTree(current).query(tgt_body)
            med = np.median(d)
            ok = d <= config.prune_factor * med if med > 0 else np.ones(len(d), dtype=bool)
            np.add.at(targets_sum, nn[ok], tgt_body[ok])
            np.add.at(counts, nn[ok], 1.0)
        has = counts > 0
        cons = DeformationConstraints(np.nonzero(has)[0], targets_sum[has] / counts[has, None],
                                      config.handle_weight)
        current = arap_deform(body, cons, config.arap_iterations, initial=current).vertices

    out = template.vertices.copy()
    out[body_vid] = current
    for part in TIRE_PARTS:
        src_vid = template.part_vertices(part)
        tgt_vid = target.part_vertices(part) if part in set(target.face_part.tolist()) else None
        if tgt_vid is None or len(tgt_vid) == 0:
            raise AlignmentError(f"target has no faces for tire part {part}")
        T = rigid_icp(template.vertices[src_vid], target.vertices[tgt_vid], config.icp_iterations)
        out[src_vid] = T.apply(template.vertices[src_vid])
    return template.with_vertices(out, name=target.name)


def rms_distance(a: Mesh, b: Mesh) -> float:
    """Vertex-wise RMS between two meshes of one topology."""
    return float(np.sqrt(((a.vertices - b.vertices) ** 2).sum(axis=1).mean()))
