"""Scene builders and checks shared by the unit and acceptance suites."""
import math

import numpy as np

from oracles import ap_bruteforce, circle_fit_3d
from vehicle3d import correspondence as co
from vehicle3d import metrics, renderer, shape_model, synthetic
from vehicle3d.correspondence import NoiseModel
from vehicle3d.mesh_core import CameraIntrinsics, Pose, vehicle_pose
from vehicle3d.metrics import DetectionRecord, GroundTruthRecord


def render_target(basis, s, pose, intr, n=300, noise=None, seed=0):
    mesh = shape_model.synthesize(basis, s)
    maps = renderer.rasterize_meshes([(mesh, pose, 0)], intr)
    nm = noise or NoiseModel(seed=seed)
    corrs = co.sample_correspondences(maps, 0, n, nm, basis.topology)
    return mesh, maps, corrs


def trans_err(a, b):
    return float(np.linalg.norm(a.translation - b.translation))


def monotone(trace):
    E = [e[3] for e in trace]
    return all(b <= a for a, b in zip(E, E[1:]))


def fd_check(frame, pose, s, delta, h=1e-6):
    g = frame.data_gradient(pose, s, delta)
    Jp, Js = frame.jacobians(pose, s)
    num = np.zeros(6 + len(s))
    numJ = np.zeros((len(frame),) + (2, 6 + len(s)))
    for k in range(6 + len(s)):
        e = np.zeros(6 + len(s))
        e[k] = h

        def at(sign):
            d = sign * e
            return pose.retract(d[:3], d[3:6]), s + d[6:]

        (pp, sp), (pm, sm) = at(1.0), at(-1.0)
        num[k] = (frame.data_energy(pp, sp, delta) - frame.data_energy(pm, sm, delta)) / (2 * h)
        numJ[:, :, k] = (frame.residuals(pp, sp) - frame.residuals(pm, sm)) / (2 * h)
    J = np.concatenate([Jp, Js], axis=2)
    rel_g = np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12)
    rel_J = np.linalg.norm(J - numJ) / max(np.linalg.norm(numJ), 1e-12)
    return rel_g, rel_J


def square(n, x0, y0, s):
    m = np.zeros((n, n), dtype=bool)
    m[y0:y0 + s, x0:x0 + s] = True
    return m


def random_mask_case(rng, n=12):
    pred, gt = [], []
    for _ in range(rng.integers(1, 3)):
        g = [square(n, *rng.integers(0, 6, 2), rng.integers(3, 6)) for _ in range(rng.integers(0, 4))]
        p = []
        for _ in range(rng.integers(0, 4)):
            if g and rng.random() < 0.7:
                base = g[rng.integers(len(g))]
                m = np.roll(base, rng.integers(-2, 3, 2), axis=(0, 1))
            else:
                m = square(n, *rng.integers(0, 8, 2), rng.integers(2, 5))
            p.append((m, float(rng.random())))
        pred.append(p)
        gt.append(g)
    return pred, gt


def random_a3dp_case(rng, meshes):
    frames = [str(k) for k in range(rng.integers(1, 3))]
    gts, dets = [], []
    for fr in frames:
        for _ in range(rng.integers(0, 3)):
            gts.append(GroundTruthRecord(vehicle_pose(rng.uniform(-3, 3), [rng.uniform(-3, 3), 0, rng.uniform(5, 20)]),
                                         meshes[rng.integers(len(meshes))], fr))
    n_det = rng.integers(0, 6)
    scores = rng.permutation(n_det) / 10 + rng.random() * 0.01  # distinct
    for k in range(n_det):
        if gts and rng.random() < 0.8:
            g = gts[rng.integers(len(gts))]
            pose = g.pose.retract(rng.normal(size=3) * 0.3, rng.normal(size=3) * 1.2)
            fr = g.frame
        else:
            fr = frames[rng.integers(len(frames))]
            pose = vehicle_pose(0.0, [rng.uniform(-5, 5), 0, rng.uniform(5, 20)])
        dets.append(DetectionRecord(pose, meshes[rng.integers(len(meshes))], float(scores[k]), fr))
    return dets, gts


def a3dp_oracle(dets, gts, thresholds, mode):
    frames = sorted({d.frame for d in dets} | {g.frame for g in gts})
    per_frame = []
    for fr in frames:
        ds = [d for d in dets if d.frame == fr]
        gs = [g for g in gts if g.frame == fr]
        T = np.array([[np.linalg.norm(d.pose.translation - g.pose.translation)
                       / (np.linalg.norm(g.pose.translation) if mode == "rel" else 1.0) for g in gs] for d in ds])
        R = np.array([[2 * math.acos(min(1.0, abs(float(d.pose.rotation @ g.pose.rotation)))) for g in gs]
                      for d in ds])
        S = np.array([[metrics.volume_iou(d.mesh, g.mesh) for g in gs] for d in ds])
        per_frame.append(([d.score for d in ds], T.reshape(len(ds), len(gs)), R.reshape(len(ds), len(gs)),
                          S.reshape(len(ds), len(gs))))

    def level(s_thr, t_thr, r_thr):
        images = [(sc, S, (S >= s_thr) & (T <= t_thr) & (R <= r_thr), T) for sc, T, R, S in per_frame]
        return ap_bruteforce(images, len(gts))

    levels = [level(*lv) for lv in thresholds.levels]
    return float(np.mean(levels)), level(*thresholds.loose), level(*thresholds.strict), levels


def smooth_texture(res, seed=0):
    rows, cols = np.mgrid[0:res, 0:res] / res
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.3, 0.6, 3)
    return np.clip(a + 0.2 * np.sin(2 * np.pi * cols)[..., None] * [1, 0.5, 0.2]
                   + 0.15 * np.cos(np.pi * rows)[..., None] * [0.2, 0.7, 1], 0, 1)


def plane_scene(res=256):
    mesh = synthetic.grid_plane(2.0, 2.0, 6, 6, parts=3)
    intr = CameraIntrinsics(400.0, 400.0, 159.5, 159.5, 320, 320)
    pose = Pose([1.0, 0, 0, 0], [0.0, 0.0, 3.0])
    tex = smooth_texture(res)
    maps = renderer.rasterize_meshes([(mesh, pose, 0)], intr)
    img = renderer.shade_textured(maps, {0: tex})
    return mesh, intr, pose, tex, img


def rim_variance(mesh):
    out = []
    for rim in synthetic.outer_rim_vertices():
        _, _, radii = circle_fit_3d(mesh.vertices[rim])
        out.append(float(np.var(radii)))
    return out
