"""Evaluation metrics: mask mAP, A3DP pose AP, bird's-eye 3D box IoU and dimension errors."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from ._raster import covered_pixels
from .mesh_core import Mesh, Pose

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
VOXEL_PITCH = 0.05


class MetricsError(ValueError):
    pass


# --------------------------------------------------------------------------
# AP core


def average_precision(tp_sorted, n_gt: int) -> float:
    """All-point interpolated AP from TP flags ordered by descending score."""
    tp = np.asarray(tp_sorted, dtype=np.float64)
    if n_gt <= 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, tp.size + 1)
    mrec = np.r_[0.0, rec, 1.0]
    mpre = np.r_[0.0, prec, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def score_order(scores) -> np.ndarray:
    """Descending score, ties broken by lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    return np.lexsort((np.arange(s.size), -s))


def greedy_match(scores, quality, eligible, distance=None) -> np.ndarray:
    """Score-ordered greedy assignment within one image.

    ``quality[d, g]`` ranks candidate GTs (higher first); ties go to the
    smaller ``distance[d, g]`` when given, then to the lower GT index.
    ``eligible[d, g]`` says whether the pair counts as a hit. Returns the
    matched GT per detection, -1 for false positives.
    """
    quality = np.asarray(quality, dtype=np.float64)
    if quality.ndim != 2:
        quality = quality.reshape(len(scores), -1)
    eligible = np.asarray(eligible, dtype=bool).reshape(quality.shape)
    distance = np.zeros(quality.shape) if distance is None else np.asarray(distance, dtype=np.float64)
    used = np.zeros(quality.shape[1], dtype=bool)
    match = np.full(len(scores), -1, dtype=np.int64)
    for d in score_order(scores):
        cand = np.nonzero(eligible[d] & ~used)[0]
        if len(cand) == 0:
            continue
        g = cand[np.lexsort((cand, distance[d, cand], -quality[d, cand]))[0]]
        used[g] = True
        match[d] = g
    return match


def _pooled_ap(per_image, n_gt_total: int) -> float:
    """``per_image`` yields ``(scores, matches)``; detections pooled across images."""
    scores, tps = [], []
    for s, m in per_image:
        scores.append(np.asarray(s, dtype=np.float64))
        tps.append(np.asarray(m) >= 0)
    if scores:
        s = np.concatenate(scores)
        tp = np.concatenate(tps)
    else:
        s, tp = np.zeros(0), np.zeros(0, dtype=bool)
    return average_precision(tp[score_order(s)], n_gt_total)


# --------------------------------------------------------------------------
# instance masks


def mask_iou_matrix(pred_masks, gt_masks) -> np.ndarray:
    P = np.asarray([np.asarray(m, dtype=bool).ravel() for m in pred_masks])
    G = np.asarray([np.asarray(m, dtype=bool).ravel() for m in gt_masks])
    if len(P) == 0 or len(G) == 0:
        return np.zeros((len(P), len(G)))
    if P.shape[1] != G.shape[1]:
        raise MetricsError(f"mask size mismatch: {P.shape[1]} vs {G.shape[1]} pixels")
    P = P.astype(np.float64)
    G = G.astype(np.float64)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


class MaskMap(NamedTuple):
    mAP: float
    AP50: float
    AP75: float
    per_threshold: dict


def _check_shapes(pred_masks, gt_masks):
    shapes = {np.shape(m) for m in list(pred_masks) + list(gt_masks)}
    if len(shapes) > 1:
        raise MetricsError(f"mask dimension mismatch: {sorted(shapes)}")


def mask_map(predictions: Sequence[Sequence[tuple]], ground_truth: Sequence[Sequence]) -> MaskMap:
    """Instance-mask AP averaged over IoU 0.50:0.05:0.95.

    ``predictions[i]`` is a list of ``(mask, score)`` for image ``i`` and
    ``ground_truth[i]`` a list of masks.
    """
    if len(predictions) != len(ground_truth):
        raise MetricsError("prediction and ground-truth image counts differ")
    ious, scores = [], []
    for preds, gts in zip(predictions, ground_truth):
        masks = [m for m, _ in preds]
        _check_shapes(masks, gts)
        ious.append(mask_iou_matrix(masks, gts))
        scores.append(np.array([float(s) for _, s in preds]))
    n_gt = sum(len(g) for g in ground_truth)
    per = {}
    for thr in IOU_THRESHOLDS:
        per[float(thr)] = _pooled_ap(
            ((s, greedy_match(s, iou, iou >= thr - 1e-12)) for s, iou in zip(scores, ious)), n_gt)
    vals = list(per.values())
    return MaskMap(float(np.mean(vals)), per[0.5], per[0.75], per)


# --------------------------------------------------------------------------
# volumetric shape similarity


def _components(mesh: Mesh) -> list[np.ndarray]:
    n, labels = connected_components(mesh.adjacency, directed=False)
    face_lab = labels[mesh.faces[:, 0]]
    return [np.nonzero(face_lab == c)[0] for c in range(n) if np.any(face_lab == c)]


def voxelize(mesh: Mesh, pitch: float = VOXEL_PITCH) -> np.ndarray:
    """Integer voxel keys ``(K, 3)`` whose centres lie inside the mesh.

    The lattice is anchored at the origin (centres at ``(i + 0.5) * pitch``),
    so two meshes voxelized separately share one grid. Inside-ness comes from
    ray parity along +z, computed per closed component and OR'ed, so
    interpenetrating parts (tires against the body) do not cancel.
    """
    if not pitch > 0:
        raise MetricsError("voxel pitch must be positive")
    if len(mesh.faces) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    lo = np.floor(mesh.vertices.min(0) / pitch).astype(np.int64) - 1
    hi = np.ceil(mesh.vertices.max(0) / pitch).astype(np.int64) + 1
    nx, ny, nz = (hi - lo).tolist()
    occ = np.zeros((ny, nx, nz), dtype=bool)
    # grid coordinates in which voxel centres sit at integers
    g = mesh.vertices / pitch - 0.5 - lo
    for faces in _components(mesh):
        count = np.zeros((ny, nx, nz + 1), dtype=np.int64)
        tri = g[mesh.faces[faces]]
        for local, px, py, bary in covered_pixels(tri[:, :, :2], nx, ny):
            zhit = np.einsum("kc,kc->k", bary, tri[local, :, 2])
            # voxel k lies below this hit iff k < zhit
            kcut = np.clip(np.ceil(zhit).astype(np.int64), 0, nz)
            np.add.at(count, (py, px, 0), 1)
            np.add.at(count, (py, px, kcut), -1)
        occ |= (np.cumsum(count, axis=2)[:, :, :nz] % 2) == 1
    iy, ix, iz = np.nonzero(occ)
    return np.stack([ix, iy, iz], axis=1) + lo


def _keys(vox: np.ndarray) -> set:
    return set(map(tuple, vox.tolist()))


def volume_iou(a: Mesh, b: Mesh, pitch: float = VOXEL_PITCH) -> float:
    ka, kb = _keys(voxelize(a, pitch)), _keys(voxelize(b, pitch))
    union = len(ka | kb)
    return len(ka & kb) / union if union else 1.0


# --------------------------------------------------------------------------
# pose distance and A3DP


class PoseDistance(NamedTuple):
    trans_abs: float
    trans_rel: float
    rot: float
    shape_sim: float


def rotation_distance(a: Pose, b: Pose) -> float:
    return float(2.0 * math.acos(min(1.0, abs(float(np.dot(a.rotation, b.rotation))))))


def pose_distance(pred_pose: Pose, pred_mesh: Mesh | None, gt_pose: Pose, gt_mesh: Mesh | None,
                  pitch: float = VOXEL_PITCH, relative: bool = True) -> PoseDistance:
    """Translation (absolute and relative), rotation angle and volumetric shape IoU.

    Without meshes ``shape_sim`` is 1.0. ``relative=False`` tolerates a gt at
    the camera centre, reporting ``trans_rel`` as NaN.
    """
    ta = float(np.linalg.norm(pred_pose.translation - gt_pose.translation))
    norm = float(np.linalg.norm(gt_pose.translation))
    if norm == 0:
        if relative:
            raise MetricsError("relative translation error undefined for a gt at the camera centre")
        tr = math.nan
    else:
        tr = ta / norm
    sim = volume_iou(pred_mesh, gt_mesh, pitch) if pred_mesh is not None and gt_mesh is not None else 1.0
    return PoseDistance(ta, tr, rotation_distance(pred_pose, gt_pose), sim)


def _descending_grid(start, step, stop):
    n = int(round((start - stop) / step)) + 1
    return tuple(float(start - k * step) for k in range(n))


@dataclass(frozen=True)
class A3dpThresholds:
    """Joint difficulty levels; level ``j`` uses ``(shape[j], trans[j], rot[j])``.

    Default translation grid runs from 2.8 down by 0.3 to 0.1 (10 values),
    written ``[2.8:0.3:0.1]`` in the source notation.
    """

    shape: tuple = tuple(float(x) for x in np.round(np.arange(0.5, 0.951, 0.05), 2))
    trans: tuple = _descending_grid(2.8, 0.3, 0.1)
    rot: tuple = tuple(math.pi / 6 - k * math.pi / 60 for k in range(10))
    loose: tuple = (0.5, 2.8, math.pi / 6)
    strict: tuple = (0.75, 1.4, math.pi / 12)

    def __post_init__(self):
        if not len(self.shape) == len(self.trans) == len(self.rot):
            raise MetricsError("threshold lists must have equal length")
        if len(self.loose) != 3 or len(self.strict) != 3:
            raise MetricsError("loose and strict must be (shape, trans, rot) triples")

    @property
    def levels(self) -> list[tuple]:
        return list(zip(self.shape, self.trans, self.rot))

    @classmethod
    def infinite(cls, n: int = 10) -> "A3dpThresholds":
        return cls((-math.inf,) * n, (math.inf,) * n, (math.inf,) * n, (-math.inf, math.inf, math.inf),
                   (-math.inf, math.inf, math.inf))


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    pose: Pose
    mesh: Mesh | None = None
    score: float = 1.0
    frame: str = "0"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise MetricsError("score must be finite")


@dataclass(frozen=True, eq=False)
class GroundTruthRecord:
    pose: Pose
    mesh: Mesh | None = None
    frame: str = "0"


@dataclass
class A3dpResult:
    mean: float
    c_l: float
    c_s: float
    levels: list = field(default_factory=list)
    mode: str = "abs"


def _distance_tables(dets, gts, mode, pitch):
    frames = sorted({d.frame for d in dets} | {g.frame for g in gts})
    vox_cache: dict = {}

    def keys(mesh):
        k = id(mesh)
        if k not in vox_cache:
            vox_cache[k] = (mesh, _keys(voxelize(mesh, pitch)))
        return vox_cache[k][1]

    tables = []
    for fr in frames:
        di = [i for i, d in enumerate(dets) if d.frame == fr]
        gi = [i for i, g in enumerate(gts) if g.frame == fr]
        T = np.zeros((len(di), len(gi)))
        Rm = np.zeros_like(T)
        S = np.ones_like(T)
        for a, i in enumerate(di):
            for b, j in enumerate(gi):
                d, g = dets[i], gts[j]
                ta = float(np.linalg.norm(d.pose.translation - g.pose.translation))
                if mode == "rel":
                    n = float(np.linalg.norm(g.pose.translation))
                    if n == 0:
                        raise MetricsError("relative translation error undefined for a gt at the camera centre")
                    ta /= n
                T[a, b] = ta
                Rm[a, b] = rotation_distance(d.pose, g.pose)
                if d.mesh is not None and g.mesh is not None:
                    ka, kb = keys(d.mesh), keys(g.mesh)
                    u = len(ka | kb)
                    S[a, b] = len(ka & kb) / u if u else 1.0
        tables.append((np.array([dets[i].score for i in di]), T, Rm, S, len(gi)))
    return tables


def _level_ap(tables, shape_thr, trans_thr, rot_thr) -> float:
    n_gt = sum(t[4] for t in tables)
    per = []
    for scores, T, Rm, S, _ in tables:
        ok = (S >= shape_thr) & (T <= trans_thr) & (Rm <= rot_thr)
        per.append((scores, greedy_match(scores, S, ok, T)))
    return _pooled_ap(per, n_gt)


def a3dp(detections: Sequence[DetectionRecord], ground_truth: Sequence[GroundTruthRecord],
         thresholds: A3dpThresholds = A3dpThresholds(), mode: str = "abs",
         pitch: float = VOXEL_PITCH) -> A3dpResult:
    """Mean AP over the joint difficulty levels plus AP at the loose and strict triples."""
    mode = mode.lower()
    if mode not in ("abs", "rel"):
        raise MetricsError("mode must be 'abs' or 'rel'")
    tables = _distance_tables(list(detections), list(ground_truth), mode, pitch)
    levels = [_level_ap(tables, *lvl) for lvl in thresholds.levels]
    return A3dpResult(float(np.mean(levels)) if levels else 0.0, _level_ap(tables, *thresholds.loose),
                      _level_ap(tables, *thresholds.strict), levels, mode)


# --------------------------------------------------------------------------
# 3D boxes


@dataclass(frozen=True)
class OrientedBox:
    """Gravity-aligned box: ``dims = (width, height, length)`` along local x, y (up), z; yaw about y."""

    center: tuple
    dims: tuple
    yaw: float = 0.0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise MetricsError("box dims must be three positive numbers")

    def footprint(self) -> np.ndarray:
        """Counter-clockwise corners in the (x, z) plane."""
        w, _, l = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[w, l], [-w, l], [-w, -l], [w, -l]]) / 2.0
        # about +y: x' = c x + s z, z' = -s x + c z
        x = c * local[:, 0] + s * local[:, 1] + self.center[0]
        z = -s * local[:, 0] + c * local[:, 1] + self.center[2]
        poly = np.stack([x, z], axis=1)
        return poly if _signed_area(poly) > 0 else poly[::-1]

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))


def _signed_area(poly) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by convex counter-clockwise ``clip``."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for i in range(m):
        a, b = clip[i], clip[(i + 1) % m]
        if not out:
            break
        inp, out = out, []

        def side(p):
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

        for k in range(len(inp)):
            p, q = np.array(inp[k]), np.array(inp[(k + 1) % len(inp)])
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(tuple(p))
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(tuple(p + t * (q - p)))
    return np.array(out).reshape(-1, 2)


def box3d_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two gravity-aligned boxes."""
    inter_poly = clip_polygon(a.footprint(), b.footprint())
    area = abs(_signed_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    ya0, ya1 = a.center[1] - a.dims[1] / 2, a.center[1] + a.dims[1] / 2
    yb0, yb1 = b.center[1] - b.dims[1] / 2, b.center[1] + b.dims[1] / 2
    inter = area * max(0.0, min(ya1, yb1) - max(ya0, yb0))
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


def box_from_mesh(mesh: Mesh, pose: Pose | None = None) -> OrientedBox:
    """Canonical-frame bounding box, optionally placed by a yaw-only world pose."""
    lo, hi = mesh.bbox()
    center = (lo + hi) / 2
    yaw = 0.0
    if pose is not None:
        R = pose.matrix
        center = R @ center + pose.translation
        yaw = math.atan2(R[0, 2], R[2, 2])
    return OrientedBox(tuple(center.tolist()), tuple((hi - lo).tolist()), yaw)


# --------------------------------------------------------------------------
# dimensions


class DimError(NamedTuple):
    error: np.ndarray  # (width, height, length) meters
    rate: np.ndarray  # ratios


def mesh_extents(mesh: Mesh) -> np.ndarray:
    if mesh.n_vertices == 0:
        raise MetricsError("empty mesh")
    lo, hi = mesh.bbox()
    return hi - lo


def shape_dim_error(pred_mesh: Mesh, gt_mesh: Mesh) -> DimError:
    return dims_error(mesh_extents(pred_mesh), mesh_extents(gt_mesh))


def dims_error(pred_dims, gt_dims) -> DimError:
    p = np.asarray(pred_dims, dtype=np.float64)
    g = np.asarray(gt_dims, dtype=np.float64)
    if np.any(g <= 0):
        raise MetricsError("gt extents must be positive")
    err = np.abs(p - g)
    return DimError(err, err / g)


# --------------------------------------------------------------------------
# reports


def write_a3dp_csv(path, result: A3dpResult, thresholds: A3dpThresholds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "shape_thr", "trans_thr", "rot_thr", "ap"])
        for j, ((s, t, r), ap) in enumerate(zip(thresholds.levels, result.levels)):
            w.writerow([j, repr(s), repr(t), repr(r), repr(ap)])
        w.writerow(["c-l", *map(repr, thresholds.loose), repr(result.c_l)])
        w.writerow(["c-s", *map(repr, thresholds.strict), repr(result.c_s)])


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")
