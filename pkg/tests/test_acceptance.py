"""Acceptance suite. Each test records one PASS/FAIL line (see the terminal summary).

The quantitative fixtures run at desk scale (reduced network, 1 CPU core); the
sizes are listed in the README.
"""
import math

import numpy as np
import pytest
import torch

from conftest import fd_check, record_criterion, tiny_config
from gradsurf.cli import main
from gradsurf.config import desk_config
from gradsurf.evaluation import chamfer, corrupt, normal_rmse, pgp_curve, point_to_mesh, point_to_mesh_distances
from gradsurf.field import init_geometric
from gradsurf.geometry import PointCloud, QueryBatch, build_index, normalize, sample_queries
from gradsurf.inference import (AggregationConfig, MeshGrid, TriangleMesh, aggregate_normals, aggregation_weights,
                                denoise, extract_mesh, infer_normals)
from gradsurf.losses import LossTerms, project, total_loss
from gradsurf.synthetic import AnalyticField, SyntheticShape
from gradsurf.trainer import fit

REFERENCE_SAMPLES = 200_000
ABLATION_SEEDS = range(5)
ABLATION_ITERATIONS = 1000


def _noisy_sphere(seed):
    clean = SyntheticShape("sphere").cloud(5000, seed=0)
    cloud, tf = normalize(corrupt(clean, "noise_med", seed=seed))
    return clean, cloud, tf


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_finite_differences():
    gen = np.random.default_rng(0)
    shape = SyntheticShape("sphere")
    pts = shape.sample(50, seed=1) * 0.6 + gen.normal(0, 0.01, (50, 3))
    cloud = PointCloud(pts)
    idx = build_index(pts)
    batch = sample_queries(cloud, idx, 50, 8, rng_seed=2)
    net = init_geometric(tiny_config(), rng_seed=3)
    flat = net.flat_parameters()
    net.set_flat_parameters(flat + 0.05 * torch.from_numpy(gen.normal(size=flat.numel())))
    terms = {"sd": LossTerms(True, False, False, False, False), "ld": LossTerms(False, True, False, False, False),
             "pd": LossTerms(False, False, True, False, False), "n": LossTerms(False, False, False, True, False),
             "v": LossTerms(False, False, False, False, True)}
    errs = {}
    for name, t in terms.items():
        def loss_fn(model, t=t):
            _, tape = total_loss(model, cloud, batch, terms=t, index=idx)
            return tape.loss, tape
        errs[name] = fd_check(loss_fn, net, n_params=20, seed=4)[0]
    worst = max(errs.values())
    detail = "max relative FD error " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + " (limit 1e-2)"
    assert record_criterion(1, worst < 1e-2, detail)


# -- 2 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_2_clean_sphere(trained_sphere, clean_sphere):
    net, report, _ = trained_sphere
    cloud, _ = clean_sphere
    out = infer_normals(net, cloud)
    rmse_u = normal_rmse(out.normals, cloud.gt_normals, oriented=False)
    pgp90 = pgp_curve(out.normals, cloud.gt_normals, thresholds=(90,), oriented=True)[0]
    ok = rmse_u < 10 and pgp90 > 0.99
    detail = (f"unoriented RMSE {rmse_u:.3f} deg (< 10), oriented PGP-90 {pgp90:.4f} (> 0.99), "
              f"{len(report.history)} iterations in {report.seconds:.0f} s")
    assert record_criterion(2, ok, detail)


# -- 3 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_noisy_sphere_denoise():
    clean, cloud, tf = _noisy_sphere(seed=0)
    net, _ = fit(cloud, desk_config(iterations=2000).train)
    ref = SyntheticShape("sphere").sample(REFERENCE_SAMPLES, seed=99)
    before = chamfer(tf.inverse(cloud.points), ref, "L2")
    after = chamfer(tf.inverse(denoise(net, cloud).points), ref, "L2")
    reduction = 1 - after / before
    detail = f"Chamfer-L2 {before:.3e} -> {after:.3e}, reduction {100 * reduction:.1f}% (>= 30%)"
    assert record_criterion(3, reduction >= 0.30, detail)


# -- 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_torus_reconstruction():
    shape = SyntheticShape("torus")
    cloud, tf = normalize(shape.cloud(5000, seed=0))
    net, _ = fit(cloud, desk_config(iterations=2000).train)
    grid = MeshGrid(resolution=(128,))
    mesh = extract_mesh(net, grid).transformed(tf)
    cell = float(grid.spacing[0]) * tf.scale
    p2m = point_to_mesh(shape.sample(20000, seed=7), mesh)
    euler = mesh.euler_characteristic()
    ok = euler == 0 and p2m < 2 * cell
    detail = f"Euler characteristic {euler} (0), point-to-mesh {p2m / cell:.3f} cells (< 2)"
    assert record_criterion(4, ok, detail)


# -- 5 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_ablation_ordering():
    results = {}
    for seed in ABLATION_SEEDS:
        clean, cloud, _ = _noisy_sphere(seed)
        row = {}
        for preset in ("full", "ld_only", "no_n", "no_v"):
            cfg = desk_config(iterations=ABLATION_ITERATIONS, seed=seed, learning_rate=1e-4, lr_final=1e-6,
                              terms=LossTerms.preset(preset)).train
            net, _ = fit(cloud, cfg)
            agg = AggregationConfig(query_count=cfg.batch_points)
            est = infer_normals(net, cloud, config=agg, xi=cfg.xi, seed=seed)
            row[preset] = normal_rmse(est.normals, clean.gt_normals, oriented=False)
        results[seed] = row
    held = [s for s, r in results.items() if all(r["full"] <= r[k] for k in ("ld_only", "no_n", "no_v"))]
    ld_worse = sum(r["ld_only"] > r["full"] for r in results.values())
    rows = "; ".join(f"seed {s}: " + " ".join(f"{k} {v:.4f}" for k, v in r.items()) for s, r in results.items())
    detail = f"full <= every ablation in {len(held)}/5 seeds (>= 4); ld_only above full in {ld_worse}/5. {rows}"
    assert record_criterion(5, len(held) >= 4, detail)


# -- 6 -------------------------------------------------------------------------

def _brute_chamfer(a, b, squared):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    if squared:
        d = d * d
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def _brute_p2m(points, verts, faces):
    best = np.full(len(points), np.inf)
    for f in faces:
        a, b, c = verts[f]
        n = np.cross(b - a, c - a)
        n = n / np.linalg.norm(n)
        h = (points - a) @ n
        proj = points - h[:, None] * n
        # barycentric coordinates of the projection
        v0, v1, v2 = b - a, c - a, proj - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        inside = (v >= 0) & (w >= 0) & (v + w <= 1)
        dist = np.where(inside, np.abs(h), np.inf)
        for s, e in ((a, b), (b, c), (c, a)):
            t = np.clip(((points - s) @ (e - s)) / ((e - s) @ (e - s)), 0, 1)
            dist = np.minimum(dist, np.linalg.norm(points - (s + t[:, None] * (e - s)), axis=1))
        best = np.minimum(best, dist)
    return best


def _brute_angles(est, gt):
    out = []
    for e, g in zip(est, gt):
        c = sum(x * y for x, y in zip(e, g)) / math.sqrt(sum(x * x for x in e) * sum(y * y for y in g))
        out.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
    return out


def test_criterion_6_metric_oracles():
    gen = np.random.default_rng(12)
    errs = {"chamfer": 0.0, "point_to_mesh": 0.0, "normal_rmse": 0.0, "pgp_curve": 0.0}
    for trial in range(3):
        n_a, n_b = gen.integers(200, 1001, size=2)
        a, b = gen.normal(size=(n_a, 3)), gen.normal(size=(n_b, 3))
        for squared, norm in ((False, "L1"), (True, "L2")):
            errs["chamfer"] = max(errs["chamfer"], abs(chamfer(a, b, norm) - _brute_chamfer(a, b, squared)))
        verts = gen.normal(size=(600, 3))
        faces = np.arange(600).reshape(200, 3)
        pts = gen.normal(size=(1000, 3)) * 1.5
        got = point_to_mesh_distances(pts, TriangleMesh(verts, faces))
        errs["point_to_mesh"] = max(errs["point_to_mesh"], float(np.abs(got - _brute_p2m(pts, verts, faces)).max()))
        est, gt = gen.normal(size=(1000, 3)), gen.normal(size=(1000, 3))
        ang = _brute_angles(est, gt)
        for oriented in (True, False):
            ref_ang = ang if oriented else [min(x, 180 - x) for x in ang]
            rmse = math.sqrt(sum(x * x for x in ref_ang) / len(ref_ang))
            errs["normal_rmse"] = max(errs["normal_rmse"], abs(normal_rmse(est, gt, oriented) - rmse))
            thr = sorted(gen.uniform(0, 180, size=7).tolist())
            ref = [sum(x <= t for x in ref_ang) / len(ref_ang) for t in thr]
            got_pgp = pgp_curve(est, gt, thr, oriented)
            errs["pgp_curve"] = max(errs["pgp_curve"], max(abs(g - r) for g, r in zip(got_pgp, ref)))
    worst = max(errs.values())
    detail = "max |impl - brute force| " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + " (<= 1e-9)"
    assert record_criterion(6, worst <= 1e-9, detail)


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path):
    src = tmp_path / "sphere.xyz"
    assert main(["synth", "sphere", "-o", str(src), "--count", "2000"]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["fit", str(src), "-o", str(out), "--desk", "--set", "trainer.iterations=200",
                   "--set", "trainer.checkpoint_every=100", "--seed", "11", "--threads", "1"])
        assert rc == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("checkpoint*.bin"))
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    detail = f"{len(names)} checkpoint files per run, bit-identical: {same}"
    assert record_criterion(7, same and len(names) == 3, detail)


# -- 8 -------------------------------------------------------------------------

def _rotation(gen):
    q, r = np.linalg.qr(gen.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_criterion_8_invariants():
    gen = np.random.default_rng(21)
    checks = {}

    # permutation invariance of the neighbor aggregation
    ok = True
    for _ in range(5):
        pts = gen.normal(size=(120, 3))
        nrm = gen.normal(size=(120, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        perm = gen.permutation(120)
        a = aggregate_normals(pts, nrm, pts, nrm, 8, math.pi / 12)
        b = aggregate_normals(pts[perm], nrm[perm], pts[perm], nrm[perm], 8, math.pi / 12)
        ok &= bool(np.allclose(a[perm], b, atol=1e-12))
    checks["aggregation permutation"] = ok

    # rigid motions leave loss values unchanged on mock fields
    shape = SyntheticShape("torus")
    base = PointCloud(shape.sample(400, seed=3) + gen.normal(0, 0.01, (400, 3)))
    idx = build_index(base.points)
    batch = sample_queries(base, idx, 200, 8, rng_seed=4)
    ref, _ = total_loss(shape.field(), base, batch, index=idx)
    worst = 0.0
    for _ in range(3):
        R, t = _rotation(gen), gen.normal(size=3)
        Rt, tt = torch.from_numpy(R), torch.from_numpy(t)
        field = AnalyticField(lambda x, Rt=Rt, tt=tt: shape.sdf_torch((x - tt) @ Rt))
        moved_pts = base.points @ R.T + t
        moved = QueryBatch(batch.queries @ R.T + t, batch.sigmas, batch.source_indices)
        got, _ = total_loss(field, PointCloud(moved_pts), moved, index=build_index(moved_pts))
        worst = max(worst, max(abs(getattr(got, k) - getattr(ref, k)) for k in ("l_sd", "l_d", "l_n", "l_v")))
    checks["rigid-motion loss invariance"] = worst < 1e-5

    # mu decreases with distance and with angular deviation
    z = np.array([0.0, 0.0, 1.0])
    angles = np.radians(np.linspace(0, 180, 37))
    tilted = np.column_stack([np.sin(angles), np.zeros_like(angles), np.cos(angles)])
    by_angle = aggregation_weights(np.zeros(37), tilted, z, math.pi / 12)
    by_dist = aggregation_weights(np.linspace(0, 5, 37), np.tile(z, (37, 1)), z, math.pi / 12)
    checks["mu monotone"] = bool(np.all(np.diff(by_angle) <= 0) and np.all(np.diff(by_dist) <= 0)
                                 and by_angle.max() <= 1 and by_dist.min() > 0)

    # PGP curves never decrease
    ok = True
    for _ in range(20):
        est, gt = gen.normal(size=(100, 3)), gen.normal(size=(100, 3))
        for oriented in (True, False):
            curve = pgp_curve(est, gt, oriented=oriented)
            ok &= all(b >= a for a, b in zip(curve, curve[1:]))
    checks["PGP monotone"] = ok

    # projecting twice onto an exact SDF changes nothing
    worst = 0.0
    for kind in ("sphere", "torus"):
        f = SyntheticShape(kind).field()
        q = gen.uniform(-1, 1, (500, 3))
        once = project(f, q).q_prime
        twice = project(f, once).q_prime
        worst = max(worst, float(torch.max(torch.abs(once - twice))))
    checks["projection idempotence"] = worst < 1e-6

    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} invariant groups hold" + (
        f"; failing: {', '.join(failed)}" if failed else "")
    assert record_criterion(8, not failed, detail)
