"""End-to-end acceptance criteria, each reported as one PASS/FAIL line.

The loop_1km sequence (seed 1) is generated once per session.  One cold
ablation over it supplies the ablation-direction, timing and table
checks; two fresh ``cmd_run`` executions of the default
configuration supply the determinism, metric-scale and loop-closure checks.
"""

import math
import time

import numpy as np
import pytest

from panoslam.cli import ablation_cells, cmd_ablate, cmd_run
from panoslam.config import RunConfig
from panoslam.depth_refine import PsoConfig, pso_minimize, refine
from panoslam.evaluation import align, ate, rte_rre
from panoslam.geometry import PanoramicCamera, triangulate
from panoslam.loop_closing import optimize_pose_graph
from panoslam.slam import DEPTH_CREATED, TRIANGULATED
from panoslam.slam.pipeline import DepthCache, loop_trajectories, make_predictor

from conftest import acceptance, random_pose, random_sim3
from oracles import brute_ate, brute_rte_rre, perturbed, random_walk
from test_loop_closing import circle
from test_slam_core import ALG1_CASES, _assoc_setup

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def depth_cache():
    return DepthCache()


@pytest.fixture(scope="module")
def ablation(loop_dataset, depth_cache, tmp_path_factory):
    """Cold-cache ablation: every densification is computed here first."""
    out = tmp_path_factory.mktemp("ablate")
    t0 = time.perf_counter()
    result = cmd_ablate(loop_dataset.root, RunConfig(), out, cache=depth_cache)
    return result, time.perf_counter() - t0, out


@pytest.fixture(scope="module")
def default_runs(loop_dataset, tmp_path_factory):
    """Two independent cold executions of the default configuration."""
    cfg = RunConfig(dataset=str(loop_dataset.root))
    runs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        result, report, _ = cmd_run(cfg, out, cache=None, plot=name == "run_a")
        runs.append((out, result, report))
    return runs


def _row(result, method, theta):
    return next(r for r in result.rows if r.method == method and r.theta == theta)


# ---------------------------------------------------------------------------

def test_c01_ablation_direction(loop_dataset, ablation):
    result, _, _ = ablation
    parts, ok, seconds = [], True, loop_dataset.generation_seconds
    for method in ("interpolation_only", "pano_dars"):
        on, off = _row(result, method, 2.0), _row(result, method, None)
        ok &= on.status == "ok" and off.status == "ok" and on.ate < off.ate
        parts.append(f"{method} ATE {on.ate:.3f} (theta=2) vs {off.ate:.3f} (off)")
        seconds += on.seconds + off.seconds
    ok &= seconds < 600.0
    acceptance("C1 ablation direction", ok, "; ".join(parts) + f"; generate+4 runs {seconds:.0f} s < 600 s")


def test_c02_metric_scale(loop_dataset, default_runs):
    _, result, _ = default_runs[0]
    s = align(result.trajectory, loop_dataset.groundtruth, "similarity").scale
    acceptance("C2 metric scale", 0.98 <= s <= 1.02, f"similarity scale {s:.5f} in [0.98, 1.02]")


def test_c03_correction_exactness(loop_dataset):
    rng = np.random.default_rng(2024)
    cfg = RunConfig()
    predictor = make_predictor(cfg, loop_dataset.camera)
    frames = rng.choice(len(loop_dataset), 100, replace=False)
    worst, histories = 0.0, []
    for t in sorted(frames.tolist()):
        f = loop_dataset.frame(t)
        res = refine(predictor, f.context, f.sparse, cfg.pso_config(), overlap=f.sparse.valid_mask())
        assert not res.skipped
        idx = res.correction_index
        got = res.depth.depth[f.sparse.rows[idx], f.sparse.cols[idx]]
        ref = f.sparse.depth[idx]
        worst = max(worst, float(np.max(np.abs(got - ref) / ref)))
        histories.append(res.history)
    test_c03_correction_exactness.histories = histories
    acceptance("C3 correction exactness", worst <= 1e-9,
               f"max relative deviation {worst:.2e} over 100 frames (<= 1e-9)")


def test_c04_pso_contract(loop_dataset, ablation, depth_cache):
    # the ablation ran refine once per frame for pano_dars; its histories sit in the cache
    table = depth_cache.table(loop_dataset, RunConfig(dataset=str(loop_dataset.root)))
    histories = [info.pso_history for info in table.values() if info.pso_history]
    histories += getattr(test_c03_correction_exactness, "histories", [])
    violations = sum(sum(b > a for a, b in zip(h, h[1:])) for h in histories)
    res = pso_minimize(lambda x: np.sum(x * x, axis=1), 10,
                       PsoConfig(swarm_size=30, iterations=100, search_halfwidth=5.0, seed=0), seed_zero=False)
    hv = sum(b > a for a, b in zip(res.history, res.history[1:]))
    ok = violations == 0 and hv == 0 and res.best_cost < 1e-3 and len(res.history) - 1 <= 100
    ok &= len(table) == len(loop_dataset)
    acceptance("C4 PSO contract", ok,
               f"{violations} violations in {len(histories)} refine calls; sphere best {res.best_cost:.2e} "
               f"< 1e-3 after {len(res.history) - 1} iterations")


def test_c05_alg1_table():
    moved = []
    for close, state, decreasing in ALG1_CASES:
        origin = TRIANGULATED if state == "triangulated-unmodified" else DEPTH_CREATED
        _, _, _, m = _assoc_setup(origin, 0.5 if close else 3.0, 6.0 if decreasing else 12.0,
                                  last_depth=8.0, modified=state == "modified")
        moved.append(bool(m))
    permitted = [c and (s == "triangulated-unmodified" or d) for c, s, d in ALG1_CASES]
    ok = moved == permitted and sum(moved) == 3
    acceptance("C5 Alg. 1 conformance", ok, f"{sum(moved)} of 8 cases update the point (expected 3)")


def test_c06_geometry_oracles():
    rng = np.random.default_rng(6)
    cam = PanoramicCamera(1024, 512)
    p = rng.normal(size=(1000, 3)) * rng.uniform(0.5, 50.0, size=(1000, 1))
    back = cam.unproject(cam.project(p), np.linalg.norm(p, axis=1))
    e_proj = float(np.max(np.linalg.norm(back - p, axis=1)))

    e_tri, n_tri = 0.0, 0
    while n_tri < 1000:
        pa, pb = random_pose(rng, 2.0), random_pose(rng, 2.0)
        x = rng.normal(scale=10.0, size=3)
        ba, bb = pa.inverse().apply(x), pb.inverse().apply(x)
        ba, bb = ba / np.linalg.norm(ba), bb / np.linalg.norm(bb)
        if np.dot(pa.R @ ba, pb.R @ bb) > math.cos(math.radians(1.0)):
            continue
        e_tri = max(e_tri, float(np.linalg.norm(triangulate(pa, ba, pb, bb) - x)))
        n_tri += 1

    e_sim = 0.0
    for _ in range(1000):
        a, b, c = random_sim3(rng), random_sim3(rng), random_sim3(rng)
        e_sim = max(e_sim,
                    float(np.max(np.abs(((a @ b) @ c).as_matrix() - (a @ (b @ c)).as_matrix()))),
                    float(np.max(np.abs((a @ a.inverse()).as_matrix() - np.eye(4)))),
                    float(np.max(np.abs((a.inverse() @ a).as_matrix() - np.eye(4)))))
    ok = e_proj < 1e-9 and e_tri < 1e-9 and e_sim < 1e-9
    acceptance("C6 geometry oracles", ok,
               f"max errors: projection {e_proj:.1e}, triangulation {e_tri:.1e}, Sim3 axioms {e_sim:.1e} "
               f"(1000 cases each, < 1e-9)")


def test_c07_metric_oracles():
    rng = np.random.default_rng(7)
    lengths = [20.0, 50.0, 100.0]
    worst, gauge = 0.0, 0.0
    for _ in range(100):
        gt = random_walk(rng)
        est = perturbed(rng, gt).transformed(random_pose(rng, 20.0))
        rte, rre, _ = rte_rre(est, gt, lengths)
        brte, brre = brute_rte_rre(est, gt, lengths)
        worst = max(worst, abs(ate(est, gt) - brute_ate(est, gt)), abs(rte - brte), abs(rre - brre))
        moved = est.transformed(random_pose(rng, 50.0))
        rte2, rre2, _ = rte_rre(moved, gt, lengths)
        gauge = max(gauge, abs(rte2 - rte), abs(rre2 - rre))
    acceptance("C7 metric oracles", worst < 1e-9 and gauge < 1e-9,
               f"max deviation from brute force {worst:.1e}, gauge change {gauge:.1e} (100 pairs, < 1e-9)")


def test_c08_loop_closing(loop_dataset, default_runs):
    true, est, g = circle()
    res = optimize_pose_graph(g)
    before = np.linalg.norm(est[-1].translation - true[-1].translation)
    after = np.linalg.norm(res.poses[-1].translation - true[-1].translation)
    reduction = 1.0 - after / before
    gauge_ok = res.poses[0].isclose(est[0], atol=0.0)

    _, result, _ = default_runs[0]
    gt = loop_dataset.groundtruth
    pairs = []
    for b, a in loop_trajectories(result, loop_dataset.manifest.get("dt", float)):
        ref = gt.subset(range(len(b)))
        pairs.append((ate(b, ref), ate(a, ref)))
    e2e = bool(pairs) and all(post < pre for pre, post in pairs)
    detail = ", ".join(f"{pre:.3f} -> {post:.3f} m" for pre, post in pairs) or "no loop detected"
    ok = reduction >= 0.9 and gauge_ok and e2e
    acceptance("C8 loop closing", ok,
               f"circle endpoint error reduced {100 * reduction:.1f}% (>= 90%), gauge node "
               f"{'unchanged' if gauge_ok else 'MOVED'}; loop_1km ATE before -> after closure: {detail}")


def test_c09_determinism(loop_dataset, default_runs, ablation, depth_cache):
    (a, _, rep_a), (b, _, _) = default_runs
    same_files = all((a / n).read_bytes() == (b / n).read_bytes()
                     for n in ("trajectory.txt", "trajectory_online.txt", "map.txt"))
    first, _, _ = ablation
    again = cmd_ablate(loop_dataset.root, RunConfig(), cache=depth_cache, plot=False)
    same_table = first.format() == again.format()
    # the cached ablation cell agrees with the fresh default run
    cell = _row(first, "pano_dars", 2.0)
    consistent = abs(cell.ate - rep_a.ate) < 1e-12
    acceptance("C9 determinism", same_files and same_table and consistent,
               f"cmd_run outputs byte-identical: {same_files}; ablation rerun identical: {same_table}; "
               f"cached cell matches fresh run: {consistent}")


def test_c10_ablation_table(ablation):
    result, seconds, out = ablation
    ok_rows = [r for r in result.rows if r.status == "ok" and np.isfinite(r.ate)]
    cells = [(r.method, r.theta) for r in result.rows]
    ok = len(result.rows) == 12 and len(ok_rows) == 12 and cells == ablation_cells() and seconds < 3600
    print(result.format())
    acceptance("C10 theta-sweep harness", ok,
               f"{len(result.rows)} rows, {len(ok_rows)} without failure, {seconds / 60:.1f} min < 60 min")
