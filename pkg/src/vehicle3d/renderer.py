"""Z-buffer rasterizer producing instance / part / depth / UV label maps."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._raster import covered_pixels
from .mesh_core import BACKGROUND_PART, CameraIntrinsics, Mesh, Pose
from .shape_model import PcaBasis, ShapeCoefficients, synthesize

BACKGROUND_INSTANCE = -1
NEAR_PLANE = 1e-6
DEPTH_TIE = 1e-9
_DEPTH_MAGIC = b"DPT1"


class RenderError(ValueError):
    pass


class BehindCameraError(RenderError):
    pass


@dataclass
class SceneInstance:
    shape: Mesh | tuple[PcaBasis, ShapeCoefficients]
    pose: Pose
    instance_id: int

    def mesh(self) -> Mesh:
        if isinstance(self.shape, Mesh):
            return self.shape
        basis, coeffs = self.shape
        return synthesize(basis, coeffs)


@dataclass
class Scene:
    intrinsics: CameraIntrinsics
    instances: list[SceneInstance] = field(default_factory=list)

    def __post_init__(self):
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise RenderError("instance ids must be unique")
        if any(not 0 <= i < 255 for i in ids):
            raise RenderError("instance ids must lie in [0, 254]")

    def add(self, shape, pose: Pose, instance_id: int) -> "Scene":
        self.instances.append(SceneInstance(shape, pose, instance_id))
        self.__post_init__()
        return self


@dataclass
class LabelMaps:
    """Per-pixel labels. ``face_map`` (face index within its instance) is kept for visibility tests."""

    instance_map: np.ndarray
    part_map: np.ndarray
    depth_map: np.ndarray
    u_map: np.ndarray
    v_map: np.ndarray
    face_map: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.instance_map != BACKGROUND_INSTANCE

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_map.shape

    def instance_part_map(self, instance_id: int) -> np.ndarray:
        """Part labels of one instance, background elsewhere."""
        return np.where(self.instance_map == instance_id, self.part_map, BACKGROUND_PART)


def project_points(intrinsics: CameraIntrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    p = pose.apply(np.atleast_2d(points))
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([intrinsics.fx * p[:, 0] / z + intrinsics.cx,
                       intrinsics.fy * p[:, 1] / z + intrinsics.cy], axis=1)
    return px, z


def project_point(intrinsics: CameraIntrinsics, pose: Pose, point) -> tuple[np.ndarray, float]:
    px, z = project_points(intrinsics, pose, point)
    if not z[0] > 0:
        raise BehindCameraError(f"point at depth {z[0]:.6g} is behind the camera")
    return px[0], float(z[0])


def _empty_maps(h, w) -> LabelMaps:
    return LabelMaps(
        np.full((h, w), BACKGROUND_INSTANCE, dtype=np.int64),
        np.full((h, w), BACKGROUND_PART, dtype=np.int64),
        np.full((h, w), np.inf),
        np.full((h, w), np.nan),
        np.full((h, w), np.nan),
        np.full((h, w), -1, dtype=np.int64),
    )


def rasterize_meshes(items, intrinsics: CameraIntrinsics) -> LabelMaps:
    """Rasterize ``(mesh, pose, instance_id)`` triples into one set of label maps."""
    w, h = intrinsics.width, intrinsics.height
    if w * h == 0:
        raise RenderError("zero-area image")
    maps = _empty_maps(h, w)
    best_depth = np.full(h * w, np.iinfo(np.int64).max, dtype=np.int64)
    best_order = np.full(h * w, np.iinfo(np.int64).max, dtype=np.int64)
    bary_img = np.zeros((h * w, 3))
    owner = np.full(h * w, -1, dtype=np.int64)  # index into the item list

    items = sorted(items, key=lambda it: it[2])
    max_faces = max((len(m.faces) for m, _, _ in items), default=1)
    for rank, (mesh, pose, _) in enumerate(items):
        cam = pose.apply(mesh.vertices)
        z = cam[:, 2]
        ok = np.all(z[mesh.faces] > NEAR_PLANE, axis=1)
        faces_ok = np.nonzero(ok)[0]
        if len(faces_ok) == 0:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = np.stack([intrinsics.fx * cam[:, 0] / z + intrinsics.cx,
                            intrinsics.fy * cam[:, 1] / z + intrinsics.cy], axis=1)
        tri_xy = pix[mesh.faces[faces_ok]]
        tri_z = z[mesh.faces[faces_ok]]
        for local, px, py, bary in covered_pixels(tri_xy, w, h):
            q = bary / tri_z[local]
            depth = 1.0 / q.sum(axis=1)
            dkey = np.rint(depth / DEPTH_TIE).astype(np.int64)
            order = rank * max_faces + faces_ok[local]
            flat = py * w + px
            srt = np.lexsort((order, dkey, flat))
            flat, dkey, order = flat[srt], dkey[srt], order[srt]
            first = np.ones(len(flat), dtype=bool)
            first[1:] = flat[1:] != flat[:-1]
            sel = srt[first]
            flat, dkey, order = flat[first], dkey[first], order[first]
            better = (dkey < best_depth[flat]) | ((dkey == best_depth[flat]) & (order < best_order[flat]))
            f = flat[better]
            s = sel[better]
            best_depth[f] = dkey[better]
            best_order[f] = order[better]
            bary_img[f] = q[s] * depth[s, None]
            owner[f] = rank
            maps.face_map.ravel()[f] = faces_ok[local[s]]
            maps.depth_map.ravel()[f] = depth[s]

    fg = np.nonzero(owner >= 0)[0]
    face = maps.face_map.ravel()
    for rank, (mesh, _, iid) in enumerate(items):
        pix = fg[owner[fg] == rank]
        if len(pix) == 0:
            continue
        fid = face[pix]
        maps.instance_map.ravel()[pix] = iid
        maps.part_map.ravel()[pix] = mesh.face_part[fid]
        uv = np.einsum("kc,kcd->kd", bary_img[pix], mesh.corner_uv[fid])
        maps.u_map.ravel()[pix] = uv[:, 0]
        maps.v_map.ravel()[pix] = uv[:, 1]
    return maps


def rasterize(scene: Scene) -> LabelMaps:
    items = [(inst.mesh(), inst.pose, inst.instance_id) for inst in scene.instances]
    return rasterize_meshes(items, scene.intrinsics)


def render_part_silhouette(mesh: Mesh, pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    return rasterize_meshes([(mesh, pose, 0)], intrinsics).part_map


# --------------------------------------------------------------------------
# shading and export


def sample_bilinear(image: np.ndarray, x, y, mask: np.ndarray | None = None):
    """Bilinear lookup at float pixel coordinates (centers at integers).

    With ``mask``, taps outside the mask are dropped and the remaining weights
    renormalized. Returns ``(values, valid)``.
    """
    h, w = image.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    acc = np.zeros(x.shape + image.shape[2:])
    wsum = np.zeros(x.shape)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xs = np.clip(xi, 0, w - 1)
        ys = np.clip(yi, 0, h - 1)
        ok = inb & (mask[ys, xs] if mask is not None else True)
        wt = np.where(ok & (wt > 0), wt, 0.0)
        val = image[ys, xs]
        acc += (wt[..., None] * val) if image.ndim == 3 else wt * val
        wsum += wt
    valid = wsum > 1e-12
    out = np.where(valid[..., None], acc / np.where(valid, wsum, 1.0)[..., None], 0.0) \
        if image.ndim == 3 else np.where(valid, acc / np.where(valid, wsum, 1.0), 0.0)
    return out, valid


def shade_textured(maps: LabelMaps, atlases: dict, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Colour each foreground pixel from its instance's atlas at the interpolated UV."""
    from .mesh_core import uv_to_texel

    h, w = maps.shape
    img = np.empty((h, w, 3))
    img[:] = np.asarray(background, dtype=np.float64)
    for iid, atlas in atlases.items():
        sel = maps.instance_map == iid
        if not np.any(sel):
            continue
        res = atlas.shape[0]
        t = uv_to_texel(np.stack([maps.u_map[sel], maps.v_map[sel]], axis=1), res)
        col, _ = sample_bilinear(atlas, t[:, 0], t[:, 1])
        img[sel] = col
    return img


def part_palette() -> np.ndarray:
    rng = np.random.default_rng(18)
    pal = rng.uniform(0.15, 1.0, size=(BACKGROUND_PART + 1, 3))
    pal[BACKGROUND_PART] = 0.0
    return pal


def colorize_parts(part_map: np.ndarray) -> np.ndarray:
    return part_palette()[part_map]


def overlay(image: np.ndarray, part_map: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a part-coloured silhouette over an RGB image."""
    fg = (part_map != BACKGROUND_PART)[..., None]
    return np.where(fg, (1 - alpha) * image + alpha * colorize_parts(part_map), image)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(image: np.ndarray, path) -> None:
    """Write PNG or PPM depending on the suffix."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def write_pgm8(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def write_pgm16(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(data, dt, w * h, pos).reshape(h, w).astype(np.int64)


def write_depth(path, depth: np.ndarray) -> None:
    """16-byte header (magic, width, height, reserved) then little-endian float32."""
    h, w = depth.shape
    header = _DEPTH_MAGIC + struct.pack("<III", w, h, 0)
    Path(path).write_bytes(header + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic")
    w, h, _ = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, "<f4", w * h, 16).reshape(h, w).astype(np.float64)


def save_label_maps(maps: LabelMaps, out_dir, prefix: str = "") -> dict:
    """Write the five label maps; returns the written paths by name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fg = maps.foreground
    inst = np.where(fg, maps.instance_map, 255)
    paths = {
        "instance": out / f"{prefix}instance.pgm",
        "part": out / f"{prefix}part.pgm",
        "depth": out / f"{prefix}depth.raw",
        "u": out / f"{prefix}u.pgm",
        "v": out / f"{prefix}v.pgm",
    }
    write_pgm8(paths["instance"], inst)
    write_pgm8(paths["part"], np.where(fg, maps.part_map, 255))
    write_depth(paths["depth"], maps.depth_map)
    write_pgm16(paths["u"], np.where(fg, np.rint(np.nan_to_num(maps.u_map) * 65535), 0))
    write_pgm16(paths["v"], np.where(fg, np.rint(np.nan_to_num(maps.v_map) * 65535), 0))
    return paths
