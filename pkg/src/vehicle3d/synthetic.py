"""Procedural fixtures: a part-labeled vehicle template, shape variants, and test meshes.

The template is a closed, welded body (14 parts) plus four separate tire
cylinders. Variants keep the template topology and move vertices through a
small set of smooth design parameters, so they behave like aligned CAD models
for PCA. Tires only translate between variants; their radius is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh_core import NUM_PARTS, TIRE_PARTS, Mesh, SymmetryPlane

ATLAS_COLS, ATLAS_ROWS = 5, 4
TILE_W, TILE_H = 1.0 / ATLAS_COLS, 1.0 / ATLAS_ROWS
TILE_MARGIN = 0.008

TIRE_RADIUS = 0.33
TIRE_HALF_WIDTH = 0.10
TIRE_SEGMENTS = 16

VEHICLE_TYPES = ("coupe", "hatchback", "notchback", "SUV", "MPV")

# body lattice resolution and the longitudinal section boundaries (cell indices)
NA, NB, NT = 10, 6, 30
SECTIONS = (0, 5, 9, 17, 21, NT)

DEFAULT_PARAMS = {
    "width": 1.80, "length": 4.50, "bottom": 0.32,
    "h_rear": 0.98, "h_trunk": 1.02, "h_roof": 1.45, "h_hood": 0.98, "h_front": 0.88,
    "f_trunk": 0.17, "f_rear_window": 0.32, "f_roof": 0.58, "f_front_window": 0.72,
    "taper": 0.15, "round_front": 0.08, "round_rear": 0.05, "bulge": 0.02,
}

PARAM_SPREAD = {
    "width": 0.10, "length": 0.35,
    "h_rear": 0.05, "h_trunk": 0.06, "h_roof": 0.10, "h_hood": 0.06, "h_front": 0.05,
    "f_trunk": 0.025, "f_rear_window": 0.025, "f_roof": 0.03, "f_front_window": 0.025,
    "taper": 0.04, "round_front": 0.03, "round_rear": 0.02, "bulge": 0.015,
}

TYPE_PRESETS = {
    "coupe": {"h_roof": -0.10, "length": -0.15, "f_roof": -0.03, "taper": 0.03},
    "hatchback": {"length": -0.40, "f_trunk": -0.08, "f_rear_window": -0.05, "h_trunk": 0.15},
    "notchback": {},
    "SUV": {"width": 0.10, "h_roof": 0.20, "h_hood": 0.10, "h_front": 0.10, "h_trunk": 0.25,
            "h_rear": 0.20, "bottom": 0.0},
    "MPV": {"h_roof": 0.25, "f_front_window": -0.06, "f_roof": 0.06, "f_trunk": -0.06,
            "h_trunk": 0.30, "h_rear": 0.25},
}


def _tile_uv(part: int, alpha, beta):
    col, row = part % ATLAS_COLS, part // ATLAS_COLS
    u = col * TILE_W + TILE_MARGIN + np.asarray(alpha) * (TILE_W - 2 * TILE_MARGIN)
    v = row * TILE_H + TILE_MARGIN + np.asarray(beta) * (TILE_H - 2 * TILE_MARGIN)
    return np.stack([u, v], axis=-1)


def part_tile_bounds(part: int) -> tuple[np.ndarray, np.ndarray]:
    """Atlas-space box enclosing a part's chart."""
    lo = _tile_uv(part, 0.0, 0.0)
    hi = _tile_uv(part, 1.0, 1.0)
    return lo, hi


@dataclass(frozen=True)
class _Topology:
    faces: np.ndarray
    face_part: np.ndarray
    corner_uv: np.ndarray
    body_abt: np.ndarray  # (Nb, 3) lattice parameters of body vertices
    n_body: int
    tire_local: np.ndarray  # (Nt, 3) offsets of tire vertices relative to the tire center
    tire_index: np.ndarray  # which tire (0..3) each tire vertex belongs to
    rim_outer: tuple  # per tire, vertex ids of the outer rim ring


def _box_cells(na, nb, nt):
    """Surface lattice of an ``na x nb x nt`` box with per-side quad cells.

    Returns the lattice keys in index order and a dict of side -> list of
    ``(quad corner keys, (i, j) cell index)``, corners ordered so that the
    quad normal (right-handed) points outward in ``(a, b, t)`` space.
    """
    keys = {}

    def key(ia, ib, it):
        k = (ia, ib, it)
        if k not in keys:
            keys[k] = len(keys)
        return keys[k]

    sides = {s: [] for s in ("top", "bottom", "left", "right", "front", "rear")}
    # quad in local (i, j) with i along first axis, j along second axis
    for it in range(nt):
        for ia in range(na):
            sides["top"].append(([key(ia, nb, it), key(ia, nb, it + 1), key(ia + 1, nb, it + 1),
                                  key(ia + 1, nb, it)], (it, ia)))
            sides["bottom"].append(([key(ia, 0, it), key(ia + 1, 0, it), key(ia + 1, 0, it + 1),
                                     key(ia, 0, it + 1)], (it, ia)))
        for ib in range(nb):
            sides["left"].append(([key(na, ib, it), key(na, ib + 1, it), key(na, ib + 1, it + 1),
                                   key(na, ib, it + 1)], (it, ib)))
            sides["right"].append(([key(0, ib, it), key(0, ib, it + 1), key(0, ib + 1, it + 1),
                                    key(0, ib + 1, it)], (it, ib)))
    for ia in range(na):
        for ib in range(nb):
            sides["front"].append(([key(ia, ib, nt), key(ia + 1, ib, nt), key(ia + 1, ib + 1, nt),
                                    key(ia, ib + 1, nt)], (ia, ib)))
            sides["rear"].append(([key(ia, ib, 0), key(ia, ib + 1, 0), key(ia + 1, ib + 1, 0),
                                   key(ia + 1, ib, 0)], (ia, ib)))
    lattice = np.array(sorted(keys, key=keys.get), dtype=np.float64)
    return lattice, sides


def _section(it: int) -> int:
    for k in range(len(SECTIONS) - 1):
        if SECTIONS[k] <= it < SECTIONS[k + 1]:
            return k
    raise ValueError(it)


_TOP_PARTS = (4, 3, 2, 1, 0)  # trunk, rear window, roof, front window, hood along +t
_LEFT_PARTS = (9, 9, 8, 8, 7)
_RIGHT_PARTS = (12, 12, 11, 11, 10)


def _side_part(side: str, cell) -> int:
    if side == "top":
        return _TOP_PARTS[_section(cell[0])]
    if side == "bottom":
        return 13
    if side == "front":
        return 5
    if side == "rear":
        return 6
    if side == "left":
        return _LEFT_PARTS[_section(cell[0])]
    return _RIGHT_PARTS[_section(cell[0])]


def _part_cell_extent(side, part, cells):
    sel = [c for c, p in cells if p == part]
    i = [c[0] for c in sel]
    j = [c[1] for c in sel]
    return min(i), max(i) + 1, min(j), max(j) + 1


@lru_cache(maxsize=None)
def _topology() -> _Topology:
    lattice, sides = _box_cells(NA, NB, NT)
    faces, parts, uvs = [], [], []
    for side, quads in sides.items():
        labelled = [(cell, _side_part(side, cell)) for _, cell in quads]
        extents = {p: _part_cell_extent(side, p, labelled) for p in {p for _, p in labelled}}
        for (corners, cell), (_, part) in zip(quads, labelled):
            i0, i1, j0, j1 = extents[part]
            # local lattice coordinates of the four corners, matching corner order
            ci, cj = cell
            if side in ("top",):
                loc = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
            elif side == "bottom":
                loc = [(ci, cj), (ci, cj + 1), (ci + 1, cj + 1), (ci + 1, cj)]
            elif side == "left":
                loc = [(ci, cj), (ci, cj + 1), (ci + 1, cj + 1), (ci + 1, cj)]
            elif side == "right":
                loc = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
            elif side == "front":
                loc = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
            else:
                loc = [(ci, cj), (ci, cj + 1), (ci + 1, cj + 1), (ci + 1, cj)]
            alpha = [(a - i0) / (i1 - i0) for a, _ in loc]
            beta = [(b - j0) / (j1 - j0) for _, b in loc]
            quv = _tile_uv(part, alpha, beta)
            for tri in ((0, 1, 2), (0, 2, 3)):
                faces.append([corners[k] for k in tri])
                parts.append(part)
                uvs.append(quv[list(tri)])
    n_body = len(lattice)

    # tires: two rims, two capped disks with an inner ring and a center
    tire_local, tire_index, rims = [], [], []
    n = TIRE_SEGMENTS
    theta = 2 * np.pi * np.arange(n) / n
    for k, part in enumerate(TIRE_PARTS):
        outward = 1.0 if part in (14, 16) else -1.0  # left tires sit at +x
        base = n_body + len(tire_local)
        ring = lambda x, r: [(x, r * np.sin(a), r * np.cos(a)) for a in theta]  # noqa: E731
        hw, R = TIRE_HALF_WIDTH, TIRE_RADIUS
        local = (ring(outward * hw, R) + ring(-outward * hw, R)
                 + ring(outward * hw, 0.55 * R) + [(outward * hw, 0.0, 0.0)]
                 + ring(-outward * hw, 0.55 * R) + [(-outward * hw, 0.0, 0.0)])
        tire_local += local
        tire_index += [k] * len(local)
        rim_o = [base + i for i in range(n)]
        rim_i = [base + n + i for i in range(n)]
        in_o = [base + 2 * n + i for i in range(n)]
        c_o = base + 3 * n
        in_i = [base + 3 * n + 1 + i for i in range(n)]
        c_i = base + 4 * n + 1
        rims.append(tuple(rim_o))

        def add(tri, tri_uv):
            faces.append(list(tri))
            parts.append(part)
            uvs.append(_tile_uv(part, [a for a, _ in tri_uv], [b for _, b in tri_uv]))

        for i in range(n):
            j = (i + 1) % n
            a0, a1 = i / n, (i + 1) / n
            # tube band lives in the upper part of the tile
            add((rim_o[i], rim_i[i], rim_i[j]), [(a0, 1.0), (a0, 0.55), (a1, 0.55)])
            add((rim_o[i], rim_i[j], rim_o[j]), [(a0, 1.0), (a1, 0.55), (a1, 1.0)])
            for center, inner, rim, cu in ((c_o, in_o, rim_o, 0.25), (c_i, in_i, rim_i, 0.75)):
                def disk(rho, ang, cu=cu):
                    return (cu + 0.22 * rho * np.cos(ang), 0.26 + 0.22 * rho * np.sin(ang))
                ti, tj = theta[i], theta[j] if j else 2 * np.pi
                add((center, inner[i], inner[j]), [disk(0, 0), disk(0.55, ti), disk(0.55, tj)])
                add((inner[i], rim[i], rim[j]), [disk(0.55, ti), disk(1, ti), disk(1, tj)])
                add((inner[i], rim[j], inner[j]), [disk(0.55, ti), disk(1, tj), disk(0.55, tj)])

    abt = lattice / np.array([NA, NB, NT])
    abt[:, 0] = 2.0 * abt[:, 0] - 1.0
    topo = _Topology(np.array(faces, dtype=np.int64), np.array(parts, dtype=np.int64),
                     np.array(uvs, dtype=np.float64), abt, n_body,
                     np.array(tire_local), np.array(tire_index), tuple(rims))
    return _orient_outward(topo)


def _orient_outward(topo: _Topology) -> _Topology:
    v = _geometry(topo, DEFAULT_PARAMS)
    tri = v[topo.faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroid = tri.mean(axis=1)
    ref = np.empty_like(centroid)
    body = topo.face_part < 14
    mid_body = v[: topo.n_body].mean(axis=0)
    ref[body] = centroid[body] - mid_body
    centers = _tire_centers(DEFAULT_PARAMS)
    for k, part in enumerate(TIRE_PARTS):
        sel = topo.face_part == part
        ref[sel] = centroid[sel] - centers[k]
    flip = np.einsum("ij,ij->i", normal, ref) < 0
    faces = topo.faces.copy()
    uv = topo.corner_uv.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    uv[flip] = uv[flip][:, [0, 2, 1]]
    return _Topology(faces, topo.face_part, uv, topo.body_abt, topo.n_body, topo.tire_local,
                     topo.tire_index, topo.rim_outer)


def _piecewise(t, knots_t, knots_y):
    return np.interp(t, knots_t, knots_y)


def _tire_centers(p) -> np.ndarray:
    W, L = p["width"], p["length"]
    x = W / 2 - TIRE_HALF_WIDTH + 0.02
    zf = L / 2 - 0.19 * L
    zr = -L / 2 + 0.20 * L
    y = TIRE_RADIUS
    return np.array([[x, y, zf], [-x, y, zf], [x, y, zr], [-x, y, zr]])


def _geometry(topo: _Topology, p) -> np.ndarray:
    a, b, t = topo.body_abt.T
    W, L, ybot = p["width"], p["length"], p["bottom"]
    tk = np.array(SECTIONS) / NT
    frac = np.array([0.0, p["f_trunk"], p["f_rear_window"], p["f_roof"], p["f_front_window"], 1.0])
    z = -L / 2 + L * _piecewise(t, tk, frac)
    top = _piecewise(t, tk, [p["h_rear"], p["h_trunk"], p["h_roof"], p["h_roof"], p["h_hood"], p["h_front"]])
    y = ybot + b * (top - ybot)
    belt = 0.95
    up = np.clip((y - belt) / max(p["h_roof"] - belt, 1e-3), 0.0, 1.0)
    half = W / 2 * (1.0 - p["taper"] * up)
    half *= 1.0 - p["round_front"] * np.clip((t - 0.8) / 0.2, 0, 1) ** 2
    half *= 1.0 - p["round_rear"] * np.clip((0.15 - t) / 0.15, 0, 1) ** 2
    half *= 1.0 + p["bulge"] * np.sin(np.pi * t) * np.sin(np.pi * np.clip(b, 0, 1))
    x = a * half
    body = np.stack([x, y, z], axis=1)
    centers = _tire_centers(p)
    tires = topo.tire_local + centers[topo.tire_index]
    return np.concatenate([body, tires])


def vehicle_mesh(params: dict | None = None, name: str = "vehicle") -> Mesh:
    """Mesh for a parameter dict; missing keys fall back to the template values."""
    p = dict(DEFAULT_PARAMS)
    if params:
        unknown = set(params) - set(DEFAULT_PARAMS)
        if unknown:
            raise KeyError(f"unknown vehicle parameters: {sorted(unknown)}")
        p.update(params)
    topo = _topology()
    return Mesh(_geometry(topo, p), topo.faces, topo.face_part, topo.corner_uv, name=name)


def template_mesh() -> Mesh:
    return vehicle_mesh(name="template")


def outer_rim_vertices() -> list[np.ndarray]:
    """Vertex ids of each tire's outer rim ring (template topology)."""
    return [np.array(r) for r in _topology().rim_outer]


def random_params(rng: np.random.Generator, vehicle_type: str | None = None, spread: float = 1.0) -> dict:
    p = dict(DEFAULT_PARAMS)
    if vehicle_type is not None:
        for k, dv in TYPE_PRESETS[vehicle_type].items():
            p[k] += dv
    for k, s in PARAM_SPREAD.items():
        p[k] += spread * s * rng.uniform(-1.0, 1.0)
    # keep the longitudinal sections ordered
    fr = sorted([p["f_trunk"], p["f_rear_window"], p["f_roof"], p["f_front_window"]])
    p["f_trunk"], p["f_rear_window"], p["f_roof"], p["f_front_window"] = fr
    return p


def variant_meshes(n: int, seed: int = 0, types=VEHICLE_TYPES) -> list[Mesh]:
    """``n`` aligned shape variants cycling through the vehicle types."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        vt = types[i % len(types)] if types else None
        out.append(vehicle_mesh(random_params(rng, vt), name=f"variant_{i:03d}_{vt}"))
    return out


VEHICLE_SYMMETRY = SymmetryPlane([1.0, 0.0, 0.0], 0.0)


# --------------------------------------------------------------------------
# texture


def template_texture(resolution: int) -> np.ndarray:
    """Smooth procedural RGB atlas (values in [0, 1]) for the template."""
    rows, cols = np.mgrid[0:resolution, 0:resolution]
    u = (cols + 0.5) / resolution
    v = 1.0 - (rows + 0.5) / resolution
    part = (np.clip((v // TILE_H).astype(int), 0, ATLAS_ROWS - 1) * ATLAS_COLS
            + np.clip((u // TILE_W).astype(int), 0, ATLAS_COLS - 1))
    rng = np.random.default_rng(1234)
    base = rng.uniform(0.25, 0.75, size=(ATLAS_COLS * ATLAS_ROWS, 3))
    lu = (u % TILE_W) / TILE_W
    lv = (v % TILE_H) / TILE_H
    wave = 0.12 * np.sin(2 * np.pi * lu)[..., None] * np.array([1.0, 0.6, 0.3]) \
        + 0.10 * np.cos(np.pi * lv)[..., None] * np.array([0.3, 0.8, 1.0])
    return np.clip(base[part] + wave, 0.0, 1.0)


# --------------------------------------------------------------------------
# small fixtures


def box_mesh(size=(1.0, 1.0, 1.0), cells=(1, 1, 1), part: int = 0, center=(0.0, 0.0, 0.0),
             name: str = "box") -> Mesh:
    """Closed, welded box surface on a lattice, one part, tiled atlas per side."""
    na, nb, nt = cells
    lattice, sides = _box_cells(na, nb, nt)
    faces, uvs = [], []
    side_tiles = {"top": 0, "bottom": 1, "left": 2, "right": 3, "front": 4, "rear": 5}
    for side, quads in sides.items():
        col, row = side_tiles[side] % 3, side_tiles[side] // 3
        ni = max(c[0] for _, c in quads) + 1
        nj = max(c[1] for _, c in quads) + 1
        for corners, (ci, cj) in quads:
            loc = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
            cuv = [((col + 0.05 + 0.9 * a / ni) / 3, (row + 0.05 + 0.9 * b / nj) / 2) for a, b in loc]
            for tri in ((0, 1, 2), (0, 2, 3)):
                faces.append([corners[k] for k in tri])
                uvs.append([cuv[k] for k in tri])
    scale = np.array(size) / np.array([na, nb, nt])
    verts = (lattice - np.array([na, nb, nt]) / 2.0) * scale + np.asarray(center)
    faces = np.array(faces)
    return Mesh(verts, faces, np.full(len(faces), part), np.array(uvs), name=name)


def grid_plane(width: float, height: float, nx: int, ny: int, z: float = 0.0, parts: int = 1,
               name: str = "plane") -> Mesh:
    """Planar grid in the ``z`` plane, split into ``parts`` vertical strips with their own charts."""
    xs = np.linspace(-width / 2, width / 2, nx + 1)
    ys = np.linspace(-height / 2, height / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    idx = np.arange(X.size).reshape(ny + 1, nx + 1)
    faces, fparts, uvs = [], [], []
    per = nx / parts
    for j in range(ny):
        for i in range(nx):
            part = min(int(i // per), parts - 1)
            i0 = part * per
            quad = [idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]]
            loc = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            al = [(a - i0) / per for a, _ in loc]
            be = [b / ny for _, b in loc]
            quv = _tile_uv(part, al, be)
            for tri in ((0, 1, 2), (0, 2, 3)):
                faces.append([quad[k] for k in tri])
                fparts.append(part)
                uvs.append(quv[list(tri)])
    return Mesh(verts, np.array(faces), np.array(fparts), np.array(uvs), name=name)


def twisted_bar_setup(angle_deg: float = 30.0, cells=(2, 2, 12), size=(0.4, 0.4, 3.0)):
    """Bar mesh plus handles that hold one end and twist the other about the long axis."""
    bar = box_mesh(size=size, cells=cells, name="bar")
    z = bar.vertices[:, 2]
    lo = np.nonzero(np.isclose(z, z.min()))[0]
    hi = np.nonzero(np.isclose(z, z.max()))[0]
    c = np.cos(np.radians(angle_deg))
    s = np.sin(np.radians(angle_deg))
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    targets = np.concatenate([bar.vertices[lo], bar.vertices[hi] @ R.T])
    return bar, np.concatenate([lo, hi]), targets


def check_parts_present(mesh: Mesh) -> set:
    return set(np.unique(mesh.face_part).tolist()) & set(range(NUM_PARTS))
