"""Joint 6-DoF pose and PCA shape estimation from dense correspondences.

Total energy is ``lambda_c * E_c + lambda_s * E_s + lambda_r * E_r``:

* ``E_c`` robust (Huber) reprojection error of the surface points named by the
  correspondences;
* ``E_s`` fraction of pixels where the rendered part silhouette disagrees with
  the observed part map;
* ``E_r`` squared change of the uniform-Laplacian coordinates w.r.t. the mean shape.

``fit`` alternates Gauss-Newton on the pose and on the coefficients over the
smooth terms and uses the full energy, silhouette included, to accept or
backtrack each outer iteration.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .correspondence import CorrespondenceSet, locator_for
from .mesh_core import (BACKGROUND_PART, CameraIntrinsics, Mesh, Pose, nearest_rotation, quat_multiply,
                        quat_to_rotvec, rotvec_to_quat, save_mesh, skew)
from .renderer import render_part_silhouette
from .shape_model import PcaBasis, ShapeCoefficients, synthesize, synthesize_vertices

VEHICLE_TYPES = ("coupe", "hatchback", "notchback", "SUV", "MPV")
MAX_HALVINGS = 8


class FitError(ValueError):
    pass


class InsufficientPointsError(FitError):
    pass


class DegenerateConfigurationError(FitError):
    pass


@dataclass(frozen=True)
class FitConfig:
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    lambda_r: float = 0.5
    max_outer: int = 30
    pose_iters: int = 5
    shape_iters: int = 5
    huber_delta: float = 3.0
    coeff_bound: float = 3.0
    tol: float = 1e-6
    outlier_gate: float = 0.03  # fraction of image diagonal; inf disables

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_s, self.lambda_r) < 0:
            raise ValueError("energy weights must be non-negative")
        if min(self.max_outer, self.pose_iters, self.shape_iters) < 1:
            raise ValueError("iteration counts must be at least 1")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if not self.outlier_gate > 0:
            raise ValueError("outlier_gate must be positive")

    def scaled(self, factor: float) -> "FitConfig":
        return FitConfig(**{**asdict(self), "lambda_c": self.lambda_c * factor,
                            "lambda_s": self.lambda_s * factor, "lambda_r": self.lambda_r * factor})


@dataclass(frozen=True, eq=False)
class VehicleTypePrior:
    type_id: str
    mean_coeffs: ShapeCoefficients
    dims: tuple[float, float, float]

    def __post_init__(self):
        if self.type_id not in VEHICLE_TYPES:
            raise ValueError(f"unknown vehicle type {self.type_id!r}")
        if min(self.dims) <= 0:
            raise ValueError("prior dimensions must be positive")


def mesh_dims(mesh_or_vertices) -> np.ndarray:
    """Width, height, length: canonical-frame bounding-box extents along x, y, z."""
    v = mesh_or_vertices.vertices if isinstance(mesh_or_vertices, Mesh) else np.asarray(mesh_or_vertices)
    return v.max(axis=0) - v.min(axis=0)


def prior_from_coeffs(basis: PcaBasis, coeffs, type_id: str = "notchback") -> VehicleTypePrior:
    c = coeffs if isinstance(coeffs, ShapeCoefficients) else ShapeCoefficients(coeffs)
    return VehicleTypePrior(type_id, c, tuple(mesh_dims(synthesize_vertices(basis, c)).tolist()))


def type_priors(basis: PcaBasis, meshes_by_type: dict) -> dict:
    """Average projected coefficients per vehicle type."""
    from .shape_model import project

    out = {}
    for vt, meshes in meshes_by_type.items():
        s = np.mean([project(basis, m).s for m in meshes], axis=0)
        out[vt] = prior_from_coeffs(basis, s, vt)
    return out


@dataclass
class FitResult:
    pose: Pose
    coeffs: ShapeCoefficients
    mesh: Mesh
    energy_trace: list
    inlier_count: int
    converged: bool = False
    outer_iterations: int = 0
    dims_ratio: tuple = ()

    def to_json(self) -> str:
        return json.dumps({
            "pose": self.pose.to_dict(),
            "coeffs": self.coeffs.s.tolist(),
            "energy_trace": [dict(zip(("E_c", "E_s", "E_r", "E"), e)) for e in self.energy_trace],
            "inlier_count": self.inlier_count,
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "dims_ratio": list(self.dims_ratio),
        }, indent=2)

    def save(self, json_path, mesh_path=None) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        if mesh_path is not None:
            save_mesh(self.mesh, mesh_path)


# --------------------------------------------------------------------------
# data term machinery


def huber(e, delta):
    """Huber penalty on residual norms; equals ``e**2`` for ``e <= delta``."""
    e = np.asarray(e, dtype=np.float64)
    if math.isinf(delta):
        return e * e
    return np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)


def _irls_weights(e, delta):
    if math.isinf(delta):
        return np.ones_like(e)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def _projection_jacobian(p, intr: CameraIntrinsics):
    """``(n, 2, 3)`` derivative of the pinhole projection at camera points ``p``."""
    x, y, z = p.T
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / (z * z)
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / (z * z)
    return J


class DataFrame:
    """Correspondences bound to surface points of a basis.

    Surface points are barycentric combinations of mesh vertices; since the
    atlas is shared by every synthesized shape, ``point_i(s) = base_i + J_i s``
    exactly, with ``J_i`` the barycentric blend of per-vertex shape Jacobians.
    """

    def __init__(self, corrs: CorrespondenceSet, basis: PcaBasis, intrinsics: CameraIntrinsics):
        if len(corrs) == 0:
            raise FitError("empty correspondence list")
        loc = locator_for(basis.topology)
        face, bary, ok = loc.locate(corrs.part, corrs.uv)
        self.valid = ok
        if not np.any(ok):
            raise FitError("no correspondence resolves to the model surface")
        self.basis = basis
        self.intrinsics = intrinsics
        self.pixels = corrs.pixel[ok]
        self.weights = corrs.weight[ok]
        tri = loc.faces[face[ok]]  # (n, 3)
        b = bary[ok]
        mean = basis.mean.reshape(-1, 3)
        self.base = np.einsum("kc,kcd->kd", b, mean[tri])
        D = basis.deformation.reshape(-1, 3, basis.r)
        self.J = np.einsum("kc,kcdr->kdr", b, D[tri])  # (n, 3, r)
        self._tri, self._bary = tri, b

    def __len__(self):
        return len(self.pixels)

    @cached_property
    def smooth_G(self) -> np.ndarray:
        """``(3n, r)`` so that ``E_r = |G s|^2``.

        The gradient field is the uniform-Laplacian differential coordinate,
        blended barycentrically to each correspondence's surface point, so the
        smoothness term is summed over the same points as the data term.
        """
        L = self.basis.topology.uniform_laplacian
        D = self.basis.deformation.reshape(-1, 3, self.basis.r)
        LD = np.stack([L @ D[:, :, k] for k in range(self.basis.r)], axis=-1)  # (N, 3, r)
        G = np.einsum("kc,kcdr->kdr", self._bary, LD[self._tri])
        return G.reshape(-1, self.basis.r)

    @cached_property
    def smooth_H(self) -> np.ndarray:
        G = self.smooth_G
        return G.T @ G

    def model_points(self, s) -> np.ndarray:
        return self.base + self.J @ np.asarray(s, dtype=np.float64)

    def residuals(self, pose: Pose, s) -> np.ndarray:
        p = pose.apply(self.model_points(s))
        z = p[:, 2]
        proj = np.stack([self.intrinsics.fx * p[:, 0] / z + self.intrinsics.cx,
                         self.intrinsics.fy * p[:, 1] / z + self.intrinsics.cy], axis=1)
        return self.pixels - proj

    def jacobians(self, pose: Pose, s):
        """Residual Jacobians ``(n, 2, 6)`` w.r.t. ``(omega, tau)`` and ``(n, 2, r)`` w.r.t. ``s``."""
        P = self.model_points(s)
        R = pose.matrix
        p = P @ R.T + pose.translation
        Dpi = _projection_jacobian(p, self.intrinsics)
        skewP = np.zeros((len(P), 3, 3))
        skewP[:, 0, 1], skewP[:, 0, 2] = -P[:, 2], P[:, 1]
        skewP[:, 1, 0], skewP[:, 1, 2] = P[:, 2], -P[:, 0]
        skewP[:, 2, 0], skewP[:, 2, 1] = -P[:, 1], P[:, 0]
        # r = t - pi(R Exp(w) P + T + tau);  d/dw (R Exp(w) P) = -R [P]x
        J_rot = np.einsum("kij,jl,klm->kim", Dpi, R, skewP)
        J_trans = -Dpi
        J_shape = -np.einsum("kij,jl,klr->kir", Dpi, R, self.J)
        return np.concatenate([J_rot, J_trans], axis=2), J_shape

    def data_energy(self, pose: Pose, s, delta: float) -> float:
        e = np.linalg.norm(self.residuals(pose, s), axis=1)
        return float(np.sum(self.weights * huber(e, delta)))

    def data_gradient(self, pose: Pose, s, delta: float) -> np.ndarray:
        """Gradient of ``E_c`` w.r.t. ``(omega, tau, s)``, length ``6 + r``."""
        r = self.residuals(pose, s)
        Jp, Js = self.jacobians(pose, s)
        w = self.weights * _irls_weights(np.linalg.norm(r, axis=1), delta)
        J = np.concatenate([Jp, Js], axis=2)
        return 2.0 * np.einsum("k,kia,ki->a", w, J, r)

    def smooth_energy(self, s) -> float:
        s = np.asarray(s, dtype=np.float64)
        return float(s @ self.smooth_H @ s)


def silhouette_energy(mesh: Mesh, pose: Pose, intrinsics: CameraIntrinsics, part_map_pred: np.ndarray,
                      ignore_mask: np.ndarray | None = None) -> float:
    """Fraction of label disagreements, normalized by the predicted foreground size."""
    if part_map_pred.shape != (intrinsics.height, intrinsics.width):
        raise FitError(f"part map is {part_map_pred.shape}, camera is "
                       f"{(intrinsics.height, intrinsics.width)}")
    rendered = render_part_silhouette(mesh, pose, intrinsics)
    care = np.ones(part_map_pred.shape, dtype=bool) if ignore_mask is None else ~ignore_mask
    disagree = np.count_nonzero((rendered != part_map_pred) & care)
    fg = np.count_nonzero((part_map_pred != BACKGROUND_PART) & care)
    return disagree / max(fg, 1)


def _coeffs_array(coeffs) -> np.ndarray:
    return coeffs.s if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs, dtype=np.float64)


def _energy_from_frame(frame: DataFrame, part_map_pred, pose, s, config: FitConfig, ignore_mask=None):
    e_c = frame.data_energy(pose, s, config.huber_delta)
    e_r = frame.smooth_energy(s)
    if part_map_pred is not None:
        mesh = synthesize(frame.basis, s)
        e_s = silhouette_energy(mesh, pose, frame.intrinsics, part_map_pred, ignore_mask)
    else:
        e_s = 0.0
    total = config.lambda_c * e_c + config.lambda_s * e_s + config.lambda_r * e_r
    return e_c, e_s, e_r, total


def energy(corrs: CorrespondenceSet, part_map_pred, pose: Pose, coeffs, basis: PcaBasis,
           intrinsics: CameraIntrinsics, config: FitConfig = FitConfig(), ignore_mask=None):
    """``(E_c, E_s, E_r, E)`` for one state. Pixels in ``ignore_mask`` are left out of ``E_s``."""
    frame = DataFrame(corrs, basis, intrinsics)
    return _energy_from_frame(frame, part_map_pred, pose, _coeffs_array(coeffs), config, ignore_mask)


# --------------------------------------------------------------------------
# PnP initialization


RANSAC_ITERS = 200
RANSAC_SAMPLE = 8
RANSAC_THRESHOLD = 0.03  # inlier radius as a fraction of the image diagonal


def _normalizer(points):
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    scale = math.sqrt(points.shape[1]) / max(d, 1e-12)
    T = np.eye(points.shape[1] + 1)
    T[:-1, :-1] *= scale
    T[:-1, -1] = -scale * c
    return T


def dlt_pose(points3d, pixels, intrinsics: CameraIntrinsics) -> Pose:
    """Linear camera resection, then the nearest rotation with positive determinant."""
    X = np.asarray(points3d, dtype=np.float64)
    x = np.asarray(pixels, dtype=np.float64)
    T3 = _normalizer(X)
    T2 = _normalizer(x)
    Xh = np.c_[X, np.ones(len(X))] @ T3.T
    xh = np.c_[x, np.ones(len(x))] @ T2.T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, 1:2] * Xh
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3
    M = np.linalg.inv(intrinsics.K) @ P
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    sv = np.linalg.svd(M[:, :3], compute_uv=False)
    scale = sv.mean()
    R = nearest_rotation(M[:, :3] / scale)
    return Pose.from_matrix(R, M[:, 3] / scale)


def _gn_pose_only(points, pixels, weights, pose: Pose, intr: CameraIntrinsics, iters: int, delta: float):
    def resid(ps):
        p = ps.apply(points)
        z = p[:, 2]
        return pixels - np.stack([intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1)

    def cost(ps):
        return float(np.sum(weights * huber(np.linalg.norm(resid(ps), axis=1), delta)))

    current = cost(pose)
    for _ in range(iters):
        r = resid(pose)
        R = pose.matrix
        p = points @ R.T + pose.translation
        Dpi = _projection_jacobian(p, intr)
        J = np.concatenate([np.einsum("kij,jl,klm->kim", Dpi, R, np.stack([skew(q) for q in points])),
                            -Dpi], axis=2)
        w = weights * _irls_weights(np.linalg.norm(r, axis=1), delta)
        H = np.einsum("k,kia,kib->ab", w, J, J)
        g = np.einsum("k,kia,ki->a", w, J, r)
        try:
            step = -np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        for _ in range(MAX_HALVINGS + 1):
            cand = pose.retract(step[:3], step[3:])
            c = cost(cand) if np.all(cand.apply(points)[:, 2] > 0) else np.inf
            if c <= current:
                pose, current = cand, c
                break
            step = step / 2
        else:
            break
    return pose


def _reprojection_errors(pose: Pose, points, pixels, intr: CameraIntrinsics):
    p = pose.apply(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1)
    e = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 0, e, np.inf)


def planar_pose(points3d, pixels, intrinsics: CameraIntrinsics) -> Pose:
    """Pose from the homography between the points' best-fit plane and the image.

    Handles the near-planar configurations (a vehicle seen side-on) on which
    the general DLT degenerates; out-of-plane offsets are left to refinement.
    """
    X = np.asarray(points3d, dtype=np.float64)
    c = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - c, full_matrices=False)
    B = Vt.T  # plane frame: columns e1, e2, normal
    if np.linalg.det(B) < 0:
        B[:, 2] *= -1
    q = (X - c) @ B[:, :2]
    xn = np.c_[np.asarray(pixels, dtype=np.float64), np.ones(len(X))] @ np.linalg.inv(intrinsics.K).T
    xn = xn[:, :2] / xn[:, 2:3]
    Tq, Tx = _normalizer(q), _normalizer(xn)
    qh = np.c_[q, np.ones(len(q))] @ Tq.T
    xh = np.c_[xn, np.ones(len(q))] @ Tx.T
    A = np.zeros((2 * len(q), 9))
    A[0::2, 0:3] = qh
    A[0::2, 6:9] = -xh[:, 0:1] * qh
    A[1::2, 3:6] = qh
    A[1::2, 6:9] = -xh[:, 1:2] * qh
    _, _, V = np.linalg.svd(A, full_matrices=False)
    H = np.linalg.inv(Tx) @ V[-1].reshape(3, 3) @ Tq
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if H[2, 2] * lam < 0:  # plane origin must lie in front of the camera
        lam = -lam
    r1, r2, t = lam * H[:, 0], lam * H[:, 1], lam * H[:, 2]
    Rp = nearest_rotation(np.c_[r1, r2, np.cross(r1, r2)])
    # camera = Rp @ [q, 0] + t and q = B^T (X - c)
    R = Rp @ B.T
    return Pose.from_matrix(R, t - R @ c)


def _hypotheses(points, pixels, intr):
    out = []
    for solver in (dlt_pose, planar_pose):
        try:
            out.append(solver(points, pixels, intr))
        except (np.linalg.LinAlgError, ValueError):
            pass
    return out


def _ransac_dlt(points, pixels, intr: CameraIntrinsics, iterations: int = RANSAC_ITERS,
                sample: int = RANSAC_SAMPLE) -> Pose:
    """General and planar resection on small random subsets, scored by inlier count; fixed seed."""
    n = len(points)
    thr = RANSAC_THRESHOLD * math.hypot(intr.width, intr.height)

    def score(pose):
        e = _reprojection_errors(pose, points, pixels, intr)
        inl = e < thr
        return (int(inl.sum()), -float(np.sum(np.minimum(e, thr)))), inl

    best, best_key, best_in = None, None, None
    for cand in _hypotheses(points, pixels, intr):
        key, inl = score(cand)
        if best is None or key > best_key:
            best, best_key, best_in = cand, key, inl
    if n >= 2 * sample:
        rng = np.random.default_rng(0)
        for _ in range(iterations):
            idx = rng.choice(n, sample, replace=False)
            for cand in _hypotheses(points[idx], pixels[idx], intr):
                key, inl = score(cand)
                if best is None or key > best_key:
                    best, best_key, best_in = cand, key, inl
        if best_in is not None and best_in.sum() >= sample:
            for cand in _hypotheses(points[best_in], pixels[best_in], intr):
                key, inl = score(cand)
                if key > best_key:
                    best, best_key, best_in = cand, key, inl
    if best is None:
        raise DegenerateConfigurationError("no resection hypothesis could be formed")
    return best


def init_pose_pnp(corrs: CorrespondenceSet, basis: PcaBasis, prior: VehicleTypePrior,
                  intrinsics: CameraIntrinsics, refine_iters: int = 15, huber_delta: float = 3.0) -> Pose:
    """DLT on the prior-type mesh followed by Gauss-Newton on the reprojection error."""
    if len(corrs) < 6:
        raise InsufficientPointsError(f"need at least 6 correspondences, got {len(corrs)}")
    frame = DataFrame(corrs, basis, intrinsics)
    pts = frame.model_points(_coeffs_array(prior.mean_coeffs))
    if len(pts) < 6:
        raise InsufficientPointsError("fewer than 6 correspondences resolve to the surface")
    if len(np.unique(np.round(pts, 9), axis=0)) < 4:
        raise InsufficientPointsError("fewer than 4 distinct surface points")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("surface points are collinear")
    if sv[2] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("surface points are coplanar")
    pose = _ransac_dlt(pts, frame.pixels, intrinsics)
    pose = _gn_pose_only(pts, frame.pixels, frame.weights, pose, intrinsics, max(refine_iters, 10),
                         huber_delta)
    if np.mean(pose.apply(pts)[:, 2] > 0) < 0.9:
        raise DegenerateConfigurationError("PnP solution places most points behind the camera")
    return pose


# --------------------------------------------------------------------------
# alternating solver


def _pose_step(frame: DataFrame, pose: Pose, s, config: FitConfig):
    lam = config.lambda_c
    current = lam * frame.data_energy(pose, s, config.huber_delta)
    for _ in range(config.pose_iters):
        r = frame.residuals(pose, s)
        Jp, _ = frame.jacobians(pose, s)
        w = frame.weights * _irls_weights(np.linalg.norm(r, axis=1), config.huber_delta)
        H = np.einsum("k,kia,kib->ab", w, Jp, Jp)
        g = np.einsum("k,kia,ki->a", w, Jp, r)
        try:
            step = -np.linalg.solve(H + 1e-12 * np.trace(H) * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        for _ in range(MAX_HALVINGS + 1):
            cand = pose.retract(step[:3], step[3:])
            c = lam * frame.data_energy(cand, s, config.huber_delta)
            if c <= current:
                pose, current = cand, c
                break
            step = step / 2
        else:
            break
    return pose


def _shape_step(frame: DataFrame, pose: Pose, s, config: FitConfig):
    """Gauss-Newton on the coefficients with the pose profiled out.

    Each shape candidate is scored after re-aligning the pose to it (seeded
    with the linearized pose response), so the step follows the reduced
    (Schur-complement) system instead of zig-zagging against the pose.
    """
    lc, lr, b = config.lambda_c, config.lambda_r, config.coeff_bound
    Hr = frame.smooth_H
    r_dim = len(s)

    def obj(ps, x):
        return lc * frame.data_energy(ps, x, config.huber_delta) + lr * float(x @ Hr @ x)

    current = obj(pose, s)
    for _ in range(config.shape_iters):
        r = frame.residuals(pose, s)
        Jp, Js = frame.jacobians(pose, s)
        w = frame.weights * _irls_weights(np.linalg.norm(r, axis=1), config.huber_delta)
        J = np.concatenate([Jp, Js], axis=2)
        H = lc * np.einsum("k,kia,kib->ab", w, J, J)
        g = lc * np.einsum("k,kia,ki->a", w, J, r)
        H[6:, 6:] += lr * Hr
        g[6:] += lr * Hr @ s
        H += 1e-12 * max(np.trace(H), 1e-300) * np.eye(6 + r_dim)
        Hpp, Hps, Hss = H[:6, :6], H[:6, 6:], H[6:, 6:]
        try:
            Kp = np.linalg.solve(Hpp, np.c_[Hps, g[:6]])
            ds = -np.linalg.solve(Hss - Hps.T @ Kp[:, :r_dim], g[6:] - Hps.T @ Kp[:, r_dim])
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = np.clip(s + ds, -b, b)
            dp = -(Kp[:, r_dim] + Kp[:, :r_dim] @ (cand - s))
            cand_pose = _pose_step(frame, pose.retract(dp[:3], dp[3:]), cand, config)
            c = obj(cand_pose, cand)
            if c <= current:
                pose, s, current = cand_pose, cand, c
                accepted = True
                break
            ds = ds / 2
        if not accepted:
            break
    return pose, s


def _interpolate(pose0: Pose, pose1: Pose, s0, s1, alpha: float):
    dq = quat_multiply(pose0.rotation * np.array([1.0, -1.0, -1.0, -1.0]), pose1.rotation)
    omega = alpha * quat_to_rotvec(dq)
    pose = Pose(quat_multiply(pose0.rotation, rotvec_to_quat(omega)),
                pose0.translation + alpha * (pose1.translation - pose0.translation))
    return pose, s0 + alpha * (s1 - s0)


def _gate_outliers(frame: DataFrame, pose: Pose, s, gate: float) -> None:
    """Zero the weight of correspondences far outside the starting consensus.

    Part-label flips land metres away on the body; under Huber they still pull
    with constant force and bias size along the viewing axis. The radius is the
    RANSAC inlier radius (fraction of the image diagonal). Skipped when it would
    discard half the set, which signals a poor start rather than outliers.
    """
    if not np.isfinite(gate):
        return
    radius = gate * np.hypot(frame.intrinsics.width, frame.intrinsics.height)
    keep = np.linalg.norm(frame.residuals(pose, s), axis=1) <= radius
    if keep.sum() >= max(6, len(keep) // 2):
        frame.weights = frame.weights * keep


def fit(corrs: CorrespondenceSet, part_map_pred, basis: PcaBasis, prior: VehicleTypePrior,
        intrinsics: CameraIntrinsics, config: FitConfig = FitConfig(), init: Pose | None = None,
        ignore_mask=None) -> FitResult:
    """Alternate pose and shape Gauss-Newton; accept outer steps only if the total energy drops."""
    frame = DataFrame(corrs, basis, intrinsics)
    pose = init if init is not None else init_pose_pnp(corrs, basis, prior, intrinsics,
                                                       huber_delta=config.huber_delta)
    s = np.clip(_coeffs_array(prior.mean_coeffs).astype(np.float64), -config.coeff_bound, config.coeff_bound)
    _gate_outliers(frame, pose, s, config.outlier_gate)

    def total(ps, x):
        return _energy_from_frame(frame, part_map_pred, ps, x, config, ignore_mask)

    e = total(pose, s)
    trace = [e]
    converged = False
    it = 0
    for it in range(1, config.max_outer + 1):
        new_pose = _pose_step(frame, pose, s, config)
        new_pose, new_s = _shape_step(frame, new_pose, s, config)
        alpha = 1.0
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            cand_pose, cand_s = _interpolate(pose, new_pose, s, new_s, alpha)
            e_new = total(cand_pose, cand_s)
            if e_new[3] < e[3]:
                accepted = (cand_pose, cand_s, e_new)
                break
            alpha /= 2
        if accepted is None:
            converged = True
            break
        rel = (e[3] - accepted[2][3]) / max(abs(e[3]), 1e-300)
        pose, s, e = accepted
        trace.append(e)
        if rel < config.tol:
            converged = True
            break
    r = frame.residuals(pose, s)
    inliers = int(np.count_nonzero(np.linalg.norm(r, axis=1) <= config.huber_delta))
    mesh = synthesize(basis, s, name="fitted")
    ratio = tuple((mesh_dims(mesh) / np.asarray(prior.dims)).tolist())
    return FitResult(pose, ShapeCoefficients(s), mesh, trace, inliers, converged, it, ratio)
