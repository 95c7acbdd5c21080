"""Texture extraction from an image and gradient-domain completion over the UV atlas."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import sparse
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .mesh_core import CameraIntrinsics, Mesh, Pose, SymmetryPlane, rasterize_atlas
from .renderer import NEAR_PLANE, rasterize_meshes, sample_bilinear

EMPTY, OBSERVED, SYMMETRIC, PART_MEAN, PRIOR = 0, 1, 2, 3, 4
TAG_NAMES = {EMPTY: "empty", OBSERVED: "observed", SYMMETRIC: "symmetric", PART_MEAN: "part-mean",
             PRIOR: "prior"}
DEPTH_TOLERANCE = 1e-3


class TextureError(ValueError):
    pass


@dataclass(frozen=True)
class CompletionWeights:
    observed: float = 10.0
    symmetric: float = 1.0
    part_mean: float = 0.05
    # tiny pull toward the prior colours on texels without data; fixes the
    # per-part constant of an otherwise pure Poisson problem
    anchor: float = 1e-4
    min_observed_fraction: float = 0.2
    symmetry_tol_texels: float = 2.0
    rtol: float = 1e-6


@dataclass(eq=False)
class TextureAtlas:
    """RGB atlas in [0, 1] plus per-texel source tags and part domains.

    ``part_domains`` holds the owning part of each texel, -1 outside every chart.
    """

    image: np.ndarray
    tags: np.ndarray
    part_domains: np.ndarray
    residual: float = 0.0
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.tags = np.asarray(self.tags, dtype=np.uint8)
        self.part_domains = np.asarray(self.part_domains, dtype=np.int64)
        r = self.image.shape[0]
        if self.image.shape != (r, r, 3) or self.tags.shape != (r, r) or self.part_domains.shape != (r, r):
            raise TextureError("atlas arrays must be (R, R, 3), (R, R), (R, R)")
        if np.any((self.tags != EMPTY) & (self.part_domains < 0)):
            raise TextureError("tagged texel outside every part domain")

    @property
    def resolution(self) -> int:
        return self.image.shape[0]

    def parts(self) -> list[int]:
        return sorted(int(p) for p in np.unique(self.part_domains) if p >= 0)

    def fraction(self, part: int, tag: int = OBSERVED) -> float:
        dom = self.part_domains == part
        n = int(dom.sum())
        return float((self.tags[dom] == tag).sum()) / n if n else 0.0

    def copy(self) -> "TextureAtlas":
        return TextureAtlas(self.image.copy(), self.tags.copy(), self.part_domains.copy(), self.residual,
                            dict(self.stats))

    def save(self, path, mask_path=None) -> None:
        """Write the colour PNG and a same-size 8-bit tag mask PNG."""
        path = Path(path)
        rgb = np.clip(np.rint(self.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(path)
        mask_path = Path(mask_path) if mask_path else path.with_name(path.stem + "_mask.png")
        Image.fromarray(self.tags, mode="L").save(mask_path)

    @classmethod
    def load(cls, path, mesh: Mesh, mask_path=None) -> "TextureAtlas":
        path = Path(path)
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        mask_path = Path(mask_path) if mask_path else path.with_name(path.stem + "_mask.png")
        tags = np.asarray(Image.open(mask_path), dtype=np.uint8)
        return cls(img, tags, atlas_layout(mesh, img.shape[0]).domains)


@dataclass(frozen=True, eq=False)
class PriorGradientField:
    """Forward differences ``gx[r, c] = T[r, c+1] - T[r, c]`` and ``gy[r, c] = T[r+1, c] - T[r, c]``."""

    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        if self.gx.shape != self.gy.shape or self.gx.ndim != 3 or self.gx.shape[0] != self.gx.shape[1]:
            raise TextureError("gradient arrays must be equal (R, R, 3)")

    @property
    def resolution(self) -> int:
        return self.gx.shape[0]

    @classmethod
    def from_image(cls, image) -> "PriorGradientField":
        img = np.asarray(image, dtype=np.float64)
        gx = np.zeros_like(img)
        gy = np.zeros_like(img)
        gx[:, :-1] = img[:, 1:] - img[:, :-1]
        gy[:-1] = img[1:] - img[:-1]
        return cls(gx, gy)

    @classmethod
    def zeros(cls, resolution: int) -> "PriorGradientField":
        z = np.zeros((resolution, resolution, 3))
        return cls(z, z.copy())


# --------------------------------------------------------------------------
# atlas layout (topology only, cached)


@dataclass(frozen=True, eq=False)
class AtlasLayout:
    faces: np.ndarray  # (R, R) face per texel, -1 outside
    bary: np.ndarray  # (R, R, 3)
    domains: np.ndarray  # (R, R) part per texel, -1 outside
    texel_size: np.ndarray  # (F,) atlas area of each face in texels

    @property
    def resolution(self) -> int:
        return self.faces.shape[0]


_LAYOUTS: dict = {}


def atlas_layout(mesh: Mesh, resolution: int) -> AtlasLayout:
    if resolution < 2:
        raise TextureError("atlas resolution must be at least 2")
    h = hashlib.blake2b(digest_size=16)
    h.update(mesh.corner_uv.tobytes())
    h.update(mesh.face_part.tobytes())
    h.update(np.int64(resolution).tobytes())
    key = h.digest()
    lay = _LAYOUTS.get(key)
    if lay is None:
        face_img, bary_img = rasterize_atlas(mesh, resolution)
        dom = np.where(face_img >= 0, mesh.face_part[np.maximum(face_img, 0)], -1)
        uv = mesh.corner_uv * resolution
        e1, e2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
        uv_area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if len(_LAYOUTS) > 8:
            _LAYOUTS.clear()
        lay = _LAYOUTS[key] = AtlasLayout(face_img, bary_img, dom, uv_area)
    return lay


def texel_points(mesh: Mesh, layout: AtlasLayout):
    """Surface point of every covered texel; returns ``(rows, cols, points, faces)``."""
    rows, cols = np.nonzero(layout.faces >= 0)
    f = layout.faces[rows, cols]
    b = layout.bary[rows, cols]
    pts = np.einsum("kc,kcd->kd", b, mesh.vertices[mesh.faces[f]])
    return rows, cols, pts, f


def _meters_per_texel(mesh: Mesh, layout: AtlasLayout) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.sqrt(mesh.face_areas() / layout.texel_size)
    return np.where(np.isfinite(m), m, 0.0)


def empty_atlas(mesh: Mesh, resolution: int) -> TextureAtlas:
    lay = atlas_layout(mesh, resolution)
    r = resolution
    return TextureAtlas(np.zeros((r, r, 3)), np.zeros((r, r), dtype=np.uint8), lay.domains.copy())


def prior_atlas(mesh: Mesh, image) -> TextureAtlas:
    """Wrap a template texture image as an atlas with every chart texel tagged prior."""
    img = np.asarray(image, dtype=np.float64)
    lay = atlas_layout(mesh, img.shape[0])
    tags = np.where(lay.domains >= 0, PRIOR, EMPTY).astype(np.uint8)
    return TextureAtlas(img.copy(), tags, lay.domains.copy())


# --------------------------------------------------------------------------
# extraction


def extract_visible(image, mesh: Mesh, pose: Pose, intrinsics: CameraIntrinsics,
                    resolution: int, pixel_mask=None) -> TextureAtlas:
    """Sample image colours onto every atlas texel whose surface point is visible.

    ``pixel_mask`` optionally restricts sampling to pixels known to show this
    object, e.g. its instance mask when other objects occlude it.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[:2] != (intrinsics.height, intrinsics.width) or img.shape[2] != 3:
        raise TextureError(f"image shape {img.shape} does not match intrinsics "
                           f"({intrinsics.height}, {intrinsics.width}, 3)")
    lay = atlas_layout(mesh, resolution)
    out = empty_atlas(mesh, resolution)
    rows, cols, pts, faces = texel_points(mesh, lay)
    cam = pose.apply(pts)
    z = cam[:, 2]
    front = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        y = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    w, h = intrinsics.width, intrinsics.height
    inb = front & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if not np.any(inb):
        return out

    maps = rasterize_meshes([(mesh, pose, 0)], intrinsics)
    fg = np.isfinite(maps.depth_map)
    # inverse depth is affine in the image over a planar face, so interpolate that
    inv_depth = np.where(fg, 1.0 / np.where(fg, maps.depth_map, 1.0), 0.0)
    idx = np.nonzero(inb)[0]
    inv_interp, ok = sample_bilinear(inv_depth, x[idx], y[idx], mask=fg)
    with np.errstate(divide="ignore"):
        ref_depth = np.where(ok & (inv_interp > 0), 1.0 / np.where(inv_interp > 0, inv_interp, 1.0), 0.0)
    vis = ok & (z[idx] <= ref_depth * (1.0 + DEPTH_TOLERANCE))
    idx = idx[vis]

    # colour taps restricted to pixels of the same part, so seams don't bleed
    part_of = mesh.face_part[faces[idx]]
    colors = np.zeros((len(idx), 3))
    got = np.zeros(len(idx), dtype=bool)
    allowed = np.ones((h, w), dtype=bool) if pixel_mask is None else np.asarray(pixel_mask, dtype=bool)
    if allowed.shape != (h, w):
        raise TextureError("pixel mask does not match the image")
    for part in np.unique(part_of):
        sel = part_of == part
        c, v = sample_bilinear(img, x[idx[sel]], y[idx[sel]], mask=(maps.part_map == part) & allowed)
        colors[sel] = c
        got[sel] = v
    idx, colors = idx[got], colors[got]
    out.image[rows[idx], cols[idx]] = colors
    out.tags[rows[idx], cols[idx]] = OBSERVED
    out.stats["observed"] = int(len(idx))
    return out


# --------------------------------------------------------------------------
# completion


def _grid_edges(dom: np.ndarray):
    """Horizontal and vertical neighbour pairs inside one part domain (flat indices)."""
    r = dom.shape[0]
    flat = np.arange(r * r).reshape(r, r)
    h_ok = (dom[:, :-1] >= 0) & (dom[:, :-1] == dom[:, 1:])
    v_ok = (dom[:-1] >= 0) & (dom[:-1] == dom[1:])
    a = np.r_[flat[:, :-1][h_ok], flat[:-1][v_ok]]
    b = np.r_[flat[:, 1:][h_ok], flat[1:][v_ok]]
    horizontal = np.r_[np.ones(h_ok.sum(), dtype=bool), np.zeros(v_ok.sum(), dtype=bool)]
    return a, b, horizontal


def _symmetric_data(mesh, layout, tags, image, planes, tol_texels):
    """Colours copied from observed texels at the mirrored surface point of empty texels."""
    rows, cols, pts, faces = texel_points(mesh, layout)
    flat = rows * layout.resolution + cols
    obs = tags.ravel()[flat] == OBSERVED
    if not np.any(obs) or not planes:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    tol = tol_texels * _meters_per_texel(mesh, layout)[faces]
    tree = cKDTree(pts[obs])
    obs_flat = flat[obs]
    todo = np.nonzero(~obs)[0]
    found_idx, found_col = [], []
    for plane in planes:
        if len(todo) == 0:
            break
        d, j = tree.query(plane.reflect(pts[todo]), distance_upper_bound=float(tol[todo].max()) + 1e-12)
        hit = np.isfinite(d) & (d <= tol[todo])
        src = obs_flat[np.where(hit, j, 0)]
        found_idx.append(flat[todo[hit]])
        found_col.append(image.reshape(-1, 3)[src[hit]])
        todo = todo[~hit]
    if not found_idx:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    return np.concatenate(found_idx), np.concatenate(found_col)


def complete_texture(partial: TextureAtlas, mesh: Mesh, planes: list[SymmetryPlane],
                     prior: PriorGradientField, prior_colors: TextureAtlas,
                     weights: CompletionWeights = CompletionWeights()) -> TextureAtlas:
    """Fill every chart texel: part means, mirrored colours, then a per-part screened Poisson solve.

    Only texels tagged observed count as evidence, so a completed atlas fed
    back in reproduces itself.
    """
    r = partial.resolution
    if prior.resolution != r or prior_colors.resolution != r:
        raise TextureError(f"resolution mismatch: partial {r}, prior {prior.resolution}, "
                           f"prior colours {prior_colors.resolution}")
    lay = atlas_layout(mesh, r)
    dom = lay.domains
    if not np.array_equal(dom, partial.part_domains):
        raise TextureError("partial atlas layout does not match the mesh")
    for p in np.unique(mesh.face_part):
        if not np.any(dom == p):
            raise TextureError(f"part {int(p)} has no texels at resolution {r}")

    obs_img = partial.image.reshape(-1, 3)
    tags = np.where(partial.tags == OBSERVED, OBSERVED, EMPTY).astype(np.uint8).ravel()
    data = np.zeros((r * r, 3))
    wdata = np.zeros(r * r)
    o = tags == OBSERVED
    data[o] = obs_img[o]
    wdata[o] = weights.observed
    domf = dom.ravel()

    # (i) part-level mean colour
    for p in np.unique(domf[domf >= 0]):
        inside = domf == p
        if (tags[inside] == OBSERVED).mean() >= weights.min_observed_fraction:
            fill = inside & (tags == EMPTY)
            data[fill] = obs_img[inside & o].mean(axis=0)
            wdata[fill] = weights.part_mean
            tags[fill] = PART_MEAN

    # (ii) symmetric copies override part means
    sidx, scol = _symmetric_data(mesh, lay, tags.reshape(r, r), partial.image, planes,
                                 weights.symmetry_tol_texels)
    data[sidx] = scol
    wdata[sidx] = weights.symmetric
    tags[sidx] = SYMMETRIC

    # (iii) prior: no data; a faint anchor to the prior colours fixes the offset
    rest = (domf >= 0) & (tags == EMPTY)
    pc = prior_colors.image.reshape(-1, 3)
    data[rest] = pc[rest]
    wdata[rest] = weights.anchor
    tags[rest] = PRIOR

    a, b, horiz = _grid_edges(dom)
    g = np.where(horiz[:, None], prior.gx.reshape(-1, 3)[a], prior.gy.reshape(-1, 3)[a])
    # gradient terms between two hard-trusted texels are constant under exact data
    keep = ~((tags[a] == OBSERVED) & (tags[b] == OBSERVED))
    a, b, g = a[keep], b[keep], g[keep]

    out = np.zeros((r * r, 3))
    worst = 0.0
    edge_part = domf[a]
    for p in np.unique(domf[domf >= 0]):
        nodes = np.nonzero(domf == p)[0]
        local = np.full(r * r, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        sel = edge_part == p
        ea, eb, eg = local[a[sel]], local[b[sel]], g[sel]
        n, m = len(nodes), len(ea)
        # incidence D maps x to x_b - x_a per edge; normal equations (D^T D + W) x = D^T g + W d
        D = sparse.csr_matrix((np.r_[-np.ones(m), np.ones(m)], (np.r_[np.arange(m), np.arange(m)],
                                                                 np.r_[ea, eb])), shape=(m, n))
        W = wdata[nodes]
        A = (D.T @ D + sparse.diags(W)).tocsr()
        Bm = D.T @ eg + W[:, None] * data[nodes]
        diag = A.diagonal()
        M = sparse.diags(1.0 / np.where(diag > 0, diag, 1.0))
        for c in range(3):
            rhs = Bm[:, c]
            nb = np.linalg.norm(rhs)
            if nb == 0:
                out[nodes, c] = 0.0
                continue
            x0 = data[nodes, c]
            x, _ = cg(A, rhs, x0=x0, rtol=weights.rtol * 0.1, atol=0.0, maxiter=10 * n, M=M)
            worst = max(worst, float(np.linalg.norm(A @ x - rhs) / nb))
            out[nodes, c] = x
    # observed colours are reported verbatim; the soft term only shapes their neighbourhood
    out[o] = obs_img[o]
    res = TextureAtlas(np.clip(out, 0.0, 1.0).reshape(r, r, 3), tags.reshape(r, r), dom.copy(), worst)
    res.stats.update({TAG_NAMES[t]: int((tags == t).sum()) for t in TAG_NAMES})
    return res


def export_atlas(atlas: TextureAtlas, out_dir, stem: str = "atlas") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img, mask = out_dir / f"{stem}.png", out_dir / f"{stem}_mask.png"
    atlas.save(img, mask)
    return img, mask
