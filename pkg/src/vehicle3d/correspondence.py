"""Inverse UV lookup and the synthetic dense-correspondence oracle."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .mesh_core import BACKGROUND_PART, NUM_PARTS, Mesh

SNAP_TOL = 0.002
GRID_BINS = 64
_INSIDE_EPS = 1e-12


class CorrespondenceError(ValueError):
    pass


class OffAtlasError(CorrespondenceError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    uv_sigma: float = 0.0
    part_flip_rate: float = 0.0
    dropout_rate: float = 0.0
    pixel_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("part_flip_rate", "dropout_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("uv_sigma", "pixel_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Correspondence:
    pixel: np.ndarray
    part: int
    uv: np.ndarray
    weight: float = 1.0


class CorrespondenceSet:
    """Column-oriented list of correspondences (pixel, part, uv, weight)."""

    def __init__(self, pixel, part, uv, weight=None):
        self.pixel = np.asarray(pixel, dtype=np.float64).reshape(-1, 2)
        self.part = np.asarray(part, dtype=np.int64).reshape(-1)
        self.uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        n = len(self.pixel)
        self.weight = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64).reshape(-1)
        if not (len(self.part) == len(self.uv) == len(self.weight) == n):
            raise CorrespondenceError("correspondence columns differ in length")
        if n and (self.part.min() < 0 or self.part.max() >= NUM_PARTS):
            raise CorrespondenceError("correspondence part must be a vehicle part, not background")
        if n and (np.any(self.weight <= 0) or np.any(self.weight > 1)):
            raise CorrespondenceError("weights must lie in (0, 1]")

    def __len__(self):
        return len(self.pixel)

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(self.pixel[i], int(self.part[i]), self.uv[i], float(self.weight[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pixel[idx], self.part[idx], self.uv[idx], self.weight[idx])

    @classmethod
    def from_list(cls, items) -> "CorrespondenceSet":
        items = list(items)
        return cls([c.pixel for c in items], [c.part for c in items], [c.uv for c in items],
                   [c.weight for c in items])

    def __eq__(self, other):
        return (isinstance(other, CorrespondenceSet) and np.array_equal(self.pixel, other.pixel)
                and np.array_equal(self.part, other.part) and np.array_equal(self.uv, other.uv)
                and np.array_equal(self.weight, other.weight))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pixel_x", "pixel_y", "part", "u", "v", "weight"])
            for (x, y), p, (u, v), wt in zip(self.pixel.tolist(), self.part.tolist(), self.uv.tolist(),
                                            self.weight.tolist()):
                w.writerow([repr(x), repr(y), p, repr(u), repr(v), repr(wt)])

    @classmethod
    def load_csv(cls, path) -> "CorrespondenceSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([[float(r["pixel_x"]), float(r["pixel_y"])] for r in rows],
                   [int(r["part"]) for r in rows],
                   [[float(r["u"]), float(r["v"])] for r in rows],
                   [float(r["weight"]) for r in rows])


# --------------------------------------------------------------------------
# inverse UV


def _closest_on_triangle(p, a, b, c):
    """Closest points of 2D query ``p`` (K, 2) on triangles (K, 3 corners); returns (dist, bary)."""
    best_d = np.full(len(p), np.inf)
    best_bary = np.zeros((len(p), 3))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        s = (a, b, c)
        e = s[j] - s[i]
        denom = np.einsum("kd,kd->k", e, e)
        t = np.clip(np.einsum("kd,kd->k", p - s[i], e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
        q = s[i] + t[:, None] * e
        d = np.linalg.norm(p - q, axis=1)
        better = d < best_d
        bary = np.zeros((len(p), 3))
        bary[:, i] = 1.0 - t
        bary[:, j] = t
        best_d = np.where(better, d, best_d)
        best_bary = np.where(better[:, None], bary, best_bary)
    return best_d, best_bary


def _barycentric_2d(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00 = np.einsum("...d,...d->...", v0, v0)
    d01 = np.einsum("...d,...d->...", v0, v1)
    d11 = np.einsum("...d,...d->...", v1, v1)
    d20 = np.einsum("...d,...d->...", v2, v0)
    d21 = np.einsum("...d,...d->...", v2, v1)
    den = d00 * d11 - d01 * d01
    den = np.where(den != 0, den, np.nan)
    w1 = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - w1 - w2, w1, w2], axis=-1)


class SurfaceLocator:
    """Atlas-space bin grid per part for ``(part, uv) -> (face, barycentric)`` queries."""

    def __init__(self, mesh: Mesh, bins: int = GRID_BINS, snap_tol: float = SNAP_TOL):
        self.bins = bins
        self.snap_tol = snap_tol
        self.corner_uv = np.array(mesh.corner_uv)
        self.faces = np.array(mesh.faces)
        self.parts = {}
        for part in range(NUM_PARTS):
            fids = np.nonzero(mesh.face_part == part)[0]
            if len(fids) == 0:
                continue
            tri = self.corner_uv[fids]
            lo = tri.reshape(-1, 2).min(axis=0)
            hi = tri.reshape(-1, 2).max(axis=0)
            size = np.maximum(hi - lo, 1e-12)
            tlo = np.floor((tri.min(axis=1) - snap_tol - lo) / size * bins).astype(int)
            thi = np.floor((tri.max(axis=1) + snap_tol - lo) / size * bins).astype(int)
            tlo = np.clip(tlo, 0, bins - 1)
            thi = np.clip(thi, 0, bins - 1)
            cells = [[] for _ in range(bins * bins)]
            for k in range(len(fids)):
                for bx in range(tlo[k, 0], thi[k, 0] + 1):
                    for by in range(tlo[k, 1], thi[k, 1] + 1):
                        cells[by * bins + bx].append(fids[k])
            width = max(1, max(len(c) for c in cells))
            table = np.full((bins * bins, width), -1, dtype=np.int64)
            for i, c in enumerate(cells):
                table[i, :len(c)] = c
            self.parts[part] = (lo, size, table, fids)

    def part_bounds(self, part: int) -> tuple[np.ndarray, np.ndarray]:
        lo, size, _, _ = self.parts[part]
        return lo, lo + size

    def locate(self, part, uv, snap_tol: float | None = None):
        """Vectorized lookup. Returns ``(face, bary, ok)``; ``ok`` is False when off-atlas.

        Queries that fall inside no triangle snap to the closest candidate
        triangle within ``snap_tol`` (``np.inf`` snaps to the whole part).
        """
        snap = self.snap_tol if snap_tol is None else snap_tol
        part = np.asarray(part, dtype=np.int64).reshape(-1)
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        face = np.full(len(uv), -1, dtype=np.int64)
        bary = np.zeros((len(uv), 3))
        ok = np.zeros(len(uv), dtype=bool)
        for p in np.unique(part):
            q = np.nonzero(part == p)[0]
            if p not in self.parts:
                continue
            lo, size, table, fids = self.parts[p]
            cell = np.floor((uv[q] - lo) / size * self.bins).astype(np.int64)
            inrange = np.all((cell >= 0) & (cell < self.bins), axis=1)
            cell = np.clip(cell, 0, self.bins - 1)
            cand = table[cell[:, 1] * self.bins + cell[:, 0]]  # (Q, K)
            cand = np.where(inrange[:, None], cand, -1)
            valid = cand >= 0
            tri = self.corner_uv[np.where(valid, cand, 0)]  # (Q, K, 3, 2)
            b = _barycentric_2d(uv[q][:, None, :], tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
            score = np.where(valid, np.nan_to_num(b.min(axis=-1), nan=-np.inf), -np.inf)
            k = np.argmax(score, axis=1)
            hit = score[np.arange(len(q)), k] >= -_INSIDE_EPS
            hb = b[np.arange(len(q)), k]
            hb = np.clip(hb, 0.0, None)
            hb /= hb.sum(axis=1, keepdims=True)
            face[q[hit]] = cand[np.arange(len(q)), k][hit]
            bary[q[hit]] = hb[hit]
            ok[q[hit]] = True
            miss = q[~hit]
            if len(miss) and snap > 0:
                self._snap(miss, uv, p, fids, snap, face, bary, ok)
        return face, bary, ok

    def _snap(self, miss, uv, part, fids, snap, face, bary, ok):
        tri = self.corner_uv[fids]
        pts = uv[miss]
        # brute force over the part's triangles; misses are rare
        nq, nf = len(pts), len(fids)
        P = np.repeat(pts, nf, axis=0)
        T = np.tile(tri, (nq, 1, 1))
        d, bb = _closest_on_triangle(P, T[:, 0], T[:, 1], T[:, 2])
        d = d.reshape(nq, nf)
        bb = bb.reshape(nq, nf, 3)
        k = np.argmin(d, axis=1)
        dk = d[np.arange(nq), k]
        good = dk <= snap
        face[miss[good]] = fids[k[good]]
        bary[miss[good]] = bb[np.arange(nq), k][good]
        ok[miss[good]] = True

    def points(self, vertices, face, bary) -> np.ndarray:
        return np.einsum("kc,kcd->kd", bary, np.asarray(vertices)[self.faces[face]])

    def uv_of(self, face, bary) -> np.ndarray:
        return np.einsum("kc,kcd->kd", bary, self.corner_uv[face])


_LOCATORS: dict = {}


def locator_for(mesh: Mesh) -> SurfaceLocator:
    """Cached locator keyed on the atlas layout, shared by meshes of one topology."""
    h = hashlib.blake2b(digest_size=16)
    h.update(mesh.corner_uv.tobytes())
    h.update(mesh.face_part.tobytes())
    h.update(mesh.faces.tobytes())
    key = h.digest()
    loc = _LOCATORS.get(key)
    if loc is None:
        if len(_LOCATORS) > 32:
            _LOCATORS.clear()
        loc = _LOCATORS[key] = SurfaceLocator(mesh)
    return loc


def uv_to_surface(mesh: Mesh, part: int, uv) -> np.ndarray:
    """3D point on ``mesh`` whose atlas coordinate in ``part`` is ``uv``."""
    if not 0 <= int(part) < NUM_PARTS:
        raise CorrespondenceError(f"part {part} is not a vehicle part")
    loc = locator_for(mesh)
    face, bary, ok = loc.locate([part], [uv])
    if not ok[0]:
        raise OffAtlasError(f"uv {tuple(np.asarray(uv).tolist())} lies outside part {part}'s atlas "
                            f"by more than {loc.snap_tol}")
    return loc.points(mesh.vertices, face, bary)[0]


def uv_to_surface_batch(mesh: Mesh, part, uv):
    """Vectorized :func:`uv_to_surface`; returns ``(points, ok)``."""
    loc = locator_for(mesh)
    face, bary, ok = loc.locate(part, uv)
    pts = np.full((len(face), 3), np.nan)
    pts[ok] = loc.points(mesh.vertices, face[ok], bary[ok])
    return pts, ok


# --------------------------------------------------------------------------
# oracle


def sample_correspondences(maps, instance: int, count: int, noise: NoiseModel,
                           topology: Mesh | None = None) -> CorrespondenceSet:
    """Draw noisy correspondences for one instance from rendered label maps.

    ``topology`` supplies the atlas used for clamping perturbed UVs; without it
    UV jitter is clamped to [0, 1] only and flips keep the raw UV.
    """
    if count < 1:
        raise CorrespondenceError("count must be at least 1")
    rows, cols = np.nonzero(maps.instance_map == instance)
    if len(rows) == 0:
        raise CorrespondenceError(f"instance {instance} is absent from the label maps")
    rng = np.random.default_rng(noise.seed)
    n = min(count, len(rows))
    pick = rng.choice(len(rows), size=n, replace=False)
    r, c = rows[pick], cols[pick]
    pixel = np.stack([c, r], axis=1).astype(np.float64)
    part = maps.part_map[r, c].copy()
    uv = np.stack([maps.u_map[r, c], maps.v_map[r, c]], axis=1)

    keep = rng.random(n) >= noise.dropout_rate
    pixel_noise = rng.normal(0.0, 1.0, (n, 2))
    uv_noise = rng.normal(0.0, 1.0, (n, 2))
    flip = rng.random(n) < noise.part_flip_rate
    offset = rng.integers(1, NUM_PARTS, n)

    pixel, part, uv = pixel[keep], part[keep], uv[keep]
    pixel_noise, uv_noise, flip, offset = pixel_noise[keep], uv_noise[keep], flip[keep], offset[keep]
    if noise.pixel_sigma > 0:
        pixel = pixel + noise.pixel_sigma * pixel_noise
    loc = locator_for(topology) if topology is not None else None
    if noise.uv_sigma > 0:
        uv = uv + noise.uv_sigma * uv_noise
        uv = _clamp_to_atlas(loc, part, uv)
    if np.any(flip):
        new_part = (part + offset) % NUM_PARTS
        if loc is not None:
            # carry the part-local position over to the new part's chart
            new_uv = uv.copy()
            for i in np.nonzero(flip)[0]:
                lo0, hi0 = loc.part_bounds(part[i])
                lo1, hi1 = loc.part_bounds(new_part[i])
                new_uv[i] = lo1 + (uv[i] - lo0) / (hi0 - lo0) * (hi1 - lo1)
            uv = np.where(flip[:, None], _clamp_to_atlas(loc, new_part, new_uv), uv)
        part = np.where(flip, new_part, part)
    assert np.all(part != BACKGROUND_PART)
    return CorrespondenceSet(pixel, part, uv)


def _clamp_to_atlas(loc: SurfaceLocator | None, part, uv):
    uv = np.clip(uv, 0.0, 1.0)
    if loc is None:
        return uv
    face, bary, ok = loc.locate(part, uv, snap_tol=np.inf)
    out = uv.copy()
    out[ok] = loc.uv_of(face[ok], bary[ok])
    return out
