import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vehicle3d import synthetic
from vehicle3d.mesh_core import (
    AtlasOverlapError, IndexRangeError, IsolatedVertexError, Mesh, MeshParseError, PartId, Pose,
    SymmetryPlane, UnknownGroupError, check_atlas, load_mesh, mesh_gradient, obj_from_text,
    quat_to_matrix, rotvec_to_quat, save_mesh, save_ply, symmetry_map,
)

from oracles import laplacian_oracle

CUBE_OBJ = """\
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
vt 0.1 0.1
vt 0.9 0.1
vt 0.9 0.9
vt 0.1 0.9
g part_00
f 1/1 3/3 2/2
f 1/1 4/4 3/3
f 5/1 6/2 7/3
f 5/1 7/3 8/4
f 1/1 2/2 6/3
f 1/1 6/3 5/4
f 2/1 3/2 7/3
f 2/1 7/3 6/4
f 3/1 4/2 8/3
f 3/1 8/3 7/4
f 4/1 1/2 5/3
f 4/1 5/3 8/4
"""


def write(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_unit_cube(tmp_path):
    m = load_mesh(write(tmp_path, CUBE_OBJ))
    assert m.n_vertices == 8 and len(m.faces) == 12
    assert np.all(m.face_part == 0)


def test_roundtrip_bitwise(tmp_path):
    m = load_mesh(write(tmp_path, CUBE_OBJ))
    save_mesh(m, tmp_path / "out.obj")
    m2 = load_mesh(tmp_path / "out.obj")
    for a, b in [(m.vertices, m2.vertices), (m.faces, m2.faces), (m.face_part, m2.face_part),
                 (m.corner_uv, m2.corner_uv)]:
        assert np.array_equal(a, b)


def test_roundtrip_vehicle(tmp_path, template):
    save_mesh(template, tmp_path / "t.obj")
    m = load_mesh(tmp_path / "t.obj")
    assert np.array_equal(m.vertices, template.vertices)
    assert m.same_topology(template)


def test_out_of_range_index(tmp_path):
    text = CUBE_OBJ.replace("f 4/1 5/3 8/4", "f 4/1 5/3 9/4")
    with pytest.raises(IndexRangeError):
        load_mesh(write(tmp_path, text))


def test_error_codes_distinct(tmp_path):
    codes = set()
    for text, exc in [
        (CUBE_OBJ.replace("v 0.5 0.5 0.5", "v 0.5 zz 0.5"), MeshParseError),
        (CUBE_OBJ.replace("f 4/1 5/3 8/4", "f 4/1 5/3 9/4"), IndexRangeError),
        (CUBE_OBJ.replace("g part_00", "g wheel"), UnknownGroupError),
    ]:
        with pytest.raises(exc) as info:
            load_mesh(write(tmp_path, text))
        codes.add(info.value.code)
    assert len(codes) == 3


def test_overlapping_atlas_rejected(tmp_path):
    text = CUBE_OBJ.replace("f 3/1 4/2 8/3\n", "g part_01\nf 3/1 4/2 8/3\n")
    with pytest.raises(AtlasOverlapError):
        load_mesh(write(tmp_path, text))


def test_template_atlas_valid(template):
    check_atlas(template)
    assert set(np.unique(template.face_part)) == set(range(18))


def test_part_id_range():
    assert PartId(18).is_background
    assert PartId(3).name
    with pytest.raises(ValueError):
        PartId(19)
    with pytest.raises(ValueError):
        PartId(-1)


def test_gradient_coincident_vertices_zero():
    m = obj_from_text(CUBE_OBJ)
    z = m.with_vertices(np.zeros_like(m.vertices))
    assert np.all(mesh_gradient(z) == 0)


def test_gradient_translation_invariant(template):
    g0 = mesh_gradient(template)
    g1 = mesh_gradient(template.with_vertices(template.vertices + [1.0, 2.0, 3.0]))
    assert np.allclose(g0, g1, atol=1e-12)


def test_gradient_tetrahedron_oracle():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    m = Mesh(v, f, np.zeros(4, int), np.tile([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]], (4, 1, 1)))
    g = mesh_gradient(m)
    assert np.allclose(g, laplacian_oracle(v, f), atol=1e-12)
    # centroid of the other three, so the differential points outward along the vertex
    assert np.allclose(g, v * 4 / 3)


def test_gradient_vehicle_oracle(template):
    assert np.allclose(mesh_gradient(template), laplacian_oracle(template.vertices, template.faces), atol=1e-12)


def test_gradient_linear(template, rng):
    a = rng.normal(size=template.vertices.shape)
    b = rng.normal(size=template.vertices.shape)
    lhs = mesh_gradient(template.with_vertices(2 * a - 3 * b))
    rhs = 2 * mesh_gradient(template.with_vertices(a)) - 3 * mesh_gradient(template.with_vertices(b))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_isolated_vertex_names_index():
    m = obj_from_text(CUBE_OBJ)
    v = np.vstack([m.vertices, [[5.0, 5.0, 5.0]]])
    bad = Mesh(v, m.faces, m.face_part, m.corner_uv)
    with pytest.raises(IsolatedVertexError) as info:
        mesh_gradient(bad)
    assert info.value.index == 8 and "8" in str(info.value)


def test_symmetry_cube_all_paired():
    m = obj_from_text(CUBE_OBJ)
    pairs, unpaired = symmetry_map(m, SymmetryPlane([1, 0, 0], 0.0), 1e-6)
    assert len(pairs) == 8 and len(unpaired) == 0
    s = {tuple(p) for p in pairs.tolist()}
    assert all((j, i) in s for i, j in s)
    for i, j in s:
        assert np.allclose(m.vertices[i] * [-1, 1, 1], m.vertices[j])


def test_symmetry_random_none(rng):
    pts = rng.uniform(-1, 1, size=(40, 3))
    plane = SymmetryPlane([1, 0, 0], 0.0)
    pairs, unpaired = symmetry_map(Mesh(pts, np.zeros((0, 3), int), np.zeros(0, int), np.zeros((0, 3, 2))),
                                   plane, 1e-3)
    refl = pts * [-1, 1, 1]
    brute = sum(np.linalg.norm(refl[i] - pts[j]) <= 1e-3 for i in range(40) for j in range(40))
    assert brute == 0
    assert len(pairs) == 0 and len(unpaired) == 40


def test_symmetry_on_plane_self_paired():
    pts = np.array([[0.0, 0.3, 0.2], [0.4, 0.0, 0.0], [-0.4, 0.0, 0.0]])
    m = Mesh(pts, np.zeros((0, 3), int), np.zeros(0, int), np.zeros((0, 3, 2)))
    pairs, _ = symmetry_map(m, SymmetryPlane([1, 0, 0]), 1e-9)
    assert [0, 0] in pairs.tolist()
    assert {(1, 2), (2, 1)} <= {tuple(p) for p in pairs.tolist()}


def test_symmetry_vehicle_involution_and_relabel(template, rng):
    plane = synthetic.VEHICLE_SYMMETRY
    pairs, _ = symmetry_map(template, plane, 1e-6)
    d = dict(map(tuple, pairs.tolist()))
    assert all(d[d[i]] == i for i in d)
    assert len(pairs) > 0.9 * template.n_vertices
    perm = rng.permutation(template.n_vertices)
    shuffled = Mesh(template.vertices[perm], np.zeros((0, 3), int), np.zeros(0, int), np.zeros((0, 3, 2)))
    pairs2, _ = symmetry_map(shuffled, plane, 1e-6)
    mapped = {(int(perm[i]), int(perm[j])) for i, j in pairs2.tolist()}
    assert mapped == {tuple(p) for p in pairs.tolist()}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda n: np.linalg.norm(n) > 1e-3),
       st.floats(-2, 2))
def test_reflect_twice_identity(normal, offset):
    plane = SymmetryPlane(normal, offset)
    p = np.random.default_rng(0).normal(size=(10, 3))
    assert np.allclose(plane.reflect(plane.reflect(p)), p, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_pose_compose_associative(vals):
    a = Pose(rotvec_to_quat(vals[0:3]), vals[3:6])
    b = Pose(rotvec_to_quat(vals[3:6]), vals[6:9])
    c = Pose(rotvec_to_quat(vals[6:9]), vals[0:3])
    l, r = a.compose(b).compose(c), a.compose(b.compose(c))
    assert np.allclose(l.matrix, r.matrix, atol=1e-9)
    assert np.allclose(l.translation, r.translation, atol=1e-9)
    for p in (a, b, c, l, a.retract([0.3, -0.2, 0.1], [0, 0, 1])):
        assert abs(np.linalg.norm(p.rotation) - 1) <= 1e-9
        assert np.allclose(quat_to_matrix(p.rotation) @ quat_to_matrix(p.rotation).T, np.eye(3), atol=1e-9)


def test_ply_export(tmp_path, template):
    save_ply(template, tmp_path / "t.ply")
    text = (tmp_path / "t.ply").read_text()
    assert "property int part" in text or "property uchar part" in text
    assert f"element vertex {template.n_vertices}" in text
