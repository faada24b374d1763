"""Acceptance suite: one test group per criterion; the terminal summary prints a PASS/FAIL line for each.

Criteria 5, 6 and 8 run the full incremental pipeline and take most of the suite's wall time.
"""

import time
import zlib

import numpy as np
import pytest

from gradcheck import check_op
from helpers import expm_series, numeric_grad, random_twist, rel_err, twist_matrix
from posefield import autodiff as ad
from posefield.autodiff import Tensor
from posefield.cli import execute_run
from posefield.epipolar import (
    CorrespondenceSet,
    Intrinsics,
    chirality_counts,
    decompose_essential,
    eight_point_fundamental,
    fundamental_to_essential,
    relative_pose_chain,
)
from posefield.liegroup import Pose, axis_angle_rotation, exp_map, log_map, random_rotation
from posefield.metrics import Similarity, Trajectory, align_similarity, evaluate_trajectory, pose_errors, psnr
from posefield.pipeline import Pipeline, PipelineConfig, identity_baseline
from posefield.posefilter import FilterConfig, PoseFilter, UpdateMode, apply_update_tensor
from posefield.radiance import FieldConfig, PixelBatch, RadianceField, RenderConfig, composite, photometric_loss
from posefield.regulation import RelativePoseTarget, regulation_loss
from posefield.synthscene import NoiseSpec, SceneSpec, TrajectorySpec, build_dataset, write_dataset
from test_autodiff import OPS, _shape

# Regression constants for criterion 5, pinned from the first verified run of this exact configuration.
# They hold for this numpy/BLAS build; float32 matmul rounding differs across BLAS builds and
# a few thousand optimizer steps amplify that.
PINNED_ORBIT_DR_DEG = 0.1933935844873191
PINNED_ORBIT_DT = 0.026190482269158988

# Criterion 6 runs a shorter orbit so the 15 runs fit in a test session; same scene, same step size.
ABLATION_FRAMES = 5
ABLATION_SEEDS = (0, 1, 2)


def detail(record_property, text):
    record_property("detail", text)


def chordal_angle(a, b):
    return float(2.0 * np.arcsin(min(1.0, np.linalg.norm(a - b) / (2.0 * np.sqrt(2.0)))))


def vector_angle(a, b):
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b))


# -- 1. Lie group ---------------------------------------------------------------------
@pytest.mark.criterion(1)
def test_lie_group_suite(record_property):
    rng = np.random.default_rng(2024)
    twists = [random_twist(rng, np.pi - 0.1) for _ in range(1000)]
    t0 = time.perf_counter()
    round_trip = max(np.abs(log_map(exp_map(x)) - x).max() for x in twists)
    series = max(np.abs(exp_map(x).matrix() - expm_series(twist_matrix(x), 20)).max()
                 for x in twists if np.linalg.norm(x[3:]) <= 1.0)
    elapsed = time.perf_counter() - t0
    detail(record_property, f"round trip {round_trip:.1e}, series {series:.1e}, {elapsed:.2f}s")
    assert round_trip < 1e-9
    assert series < 1e-10
    assert elapsed < 5.0


@pytest.mark.criterion(1)
def test_lie_group_series_full_range(record_property):
    # a 20-term series is only an oracle where it has converged; beyond |x| ~ 1 compare at 60 terms
    rng = np.random.default_rng(2025)
    worst = 0.0
    for _ in range(1000):
        x = random_twist(rng, np.pi - 0.1)
        x[:3] *= 0.5
        worst = max(worst, np.abs(exp_map(x).matrix() - expm_series(twist_matrix(x), 60)).max())
    detail(record_property, f"series (60 terms) {worst:.1e}")
    assert worst < 1e-10


# -- 2. epipolar ------------------------------------------------------------------------
@pytest.mark.criterion(2)
def test_epipolar_oracle_suite(record_property):
    k = Intrinsics(77.25, 77.25, 32.0, 32.0)
    rng = np.random.default_rng(77)
    problems = []
    while len(problems) < 100:
        r = random_rotation(rng, 0.5)
        t = rng.normal(size=3)
        t /= np.linalg.norm(t)
        n = int(rng.integers(20, 80))
        pts = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 8, n)])
        cam = pts @ r.T + t
        keep = cam[:, 2] > 0.5
        if keep.sum() < 20:
            continue
        problems.append((CorrespondenceSet(k.project(pts[keep]), k.project(cam[keep])), r, t))
    t0 = time.perf_counter()
    ok_rot = ok_dir = unique = 0
    worst_r = worst_t = 0.0
    for c, r, t in problems:
        est = relative_pose_chain(c, k, k)
        er, et = chordal_angle(est.r, r), vector_angle(est.t_dir, t)
        worst_r, worst_t = max(worst_r, er), max(worst_t, et)
        ok_rot += er < 1e-6
        ok_dir += et < 1e-6
        cands = decompose_essential(fundamental_to_essential(eight_point_fundamental(c), k, k))
        counts = np.sort(chirality_counts(cands, k.normalize(c.pts_i), k.normalize(c.pts_j)))
        unique += counts[-1] > counts[-2]
    elapsed = time.perf_counter() - t0
    detail(record_property, f"rot {ok_rot}/100 (worst {worst_r:.1e}), dir {ok_dir}/100 (worst {worst_t:.1e}), "
                            f"unique {unique}/100, {elapsed:.2f}s")
    assert ok_rot == ok_dir == unique == 100
    assert elapsed < 10.0


# -- 3. gradients ----------------------------------------------------------------------
@pytest.mark.criterion(3)
def test_gradients_raw_ops(record_property):
    extra = [
        ("matmul", ad.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        ("batched_matmul", ad.matmul, lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 1))]),
        ("linear", ad.linear, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=2)]),
        ("reshape", lambda a: ad.reshape(a, (-1,)), lambda r: [r.normal(size=(2, 3))]),
        ("astype", lambda a: ad.astype(a, np.float64), lambda r: [r.normal(size=(2, 3))]),
        ("take", lambda a: ad.take(a, np.array([2, 0, 2])), lambda r: [r.normal(size=(3, 2))]),
        ("rodrigues", lambda a: ad.stack(list(ad.rodrigues_coefficients(a)), axis=0),
         lambda r: [np.concatenate([r.uniform(0, 9, 3), r.uniform(0, 1e-4, 2)])]),
    ]
    worst, names = 0.0, []
    for name, fn, gen in OPS:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = max(worst, max(check_op(fn, gen(rng, _shape(rng)), rng) for _ in range(50)))
        names.append(name)
    for name, fn, gen in extra:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = max(worst, max(check_op(fn, gen(rng), rng) for _ in range(50)))
        names.append(name)
    detail(record_property, f"{len(names)} ops x 50 instances, worst {worst:.1e}")
    assert worst < 1e-5


@pytest.mark.criterion(3)
def test_gradients_render_to_twist(record_property):
    k = Intrinsics(50.0, 50.0, 16.0, 16.0)
    cfg = RenderConfig(n_samples=12)
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(500 + seed)
        field_ = RadianceField.init(rng, FieldConfig(depth=3, width=16, dtype="float64"))
        mode = UpdateMode("direct", "SE3" if seed % 2 == 0 else "se3")
        base = [Pose(random_rotation(rng, 0.5), rng.normal(size=3) * 0.2 + [0, 0, 4.0])]
        batch = PixelBatch(np.zeros(16, dtype=int), rng.uniform(0, 32, size=(16, 2)), rng.uniform(size=(16, 3)))
        x0 = rng.normal(size=(1, 6)) * 0.05

        def loss(x):
            rot, trans = apply_update_tensor(base, x, mode)
            return photometric_loss(batch, field_, {0: (rot[0], trans[0])}, k, cfg)

        leaf = Tensor(x0.copy(), requires_grad=True)
        ad.backward(loss(leaf))
        worst = max(worst, rel_err(leaf.grad, numeric_grad(lambda v: float(loss(Tensor(v)).data), x0, h=1e-6)))
    detail(record_property, f"50 instances, worst {worst:.1e}")
    assert worst < 1e-4


@pytest.mark.criterion(3)
def test_gradients_regulation_to_twist(record_property):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(600 + seed)
        mode = UpdateMode("direct", "SE3" if seed % 2 == 0 else "se3")
        base = [Pose(random_rotation(rng, 1.0), rng.normal(size=3)) for _ in range(3)]
        targets = []
        for i, j in [(0, 1), (1, 2), (0, 2)]:
            t = rng.normal(size=3)
            targets.append(RelativePoseTarget((i, j), random_rotation(rng, 1.0), t / np.linalg.norm(t)))
        x0 = rng.normal(size=(3, 6)) * 0.1

        def loss(x):
            rot, trans = apply_update_tensor(base, x, mode)
            return regulation_loss({i: (rot[i], trans[i]) for i in range(3)}, targets)

        leaf = Tensor(x0.copy(), requires_grad=True)
        ad.backward(loss(leaf))
        worst = max(worst, rel_err(leaf.grad, numeric_grad(lambda v: float(loss(Tensor(v)).data), x0)))
    detail(record_property, f"50 instances, worst {worst:.1e}")
    assert worst < 1e-4


@pytest.mark.criterion(3)
def test_gradients_filter_to_embeddings(record_property):
    cfg = FilterConfig(embed_dim=8, hidden=8)
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(700 + seed)
        filt = PoseFilter.init(4, UpdateMode(), rng, cfg)
        filt.params["global"] = rng.normal(size=(1, 8))
        filt.params["local"] = rng.normal(size=(4, 8))
        filt.params["w_out"] = rng.normal(size=(8, 6))
        w = rng.normal(size=(4, 6))

        def loss(p):
            return ad.sum_(filt.forward(p) * Tensor(w))

        leaves = filt.leaves()
        ad.backward(loss(leaves))
        for name in ("global", "local"):
            def f(v, name=name):
                p = filt.leaves(False)
                p[name] = Tensor(v)
                return float(loss(p).data)
            worst = max(worst, rel_err(leaves[name].grad, numeric_grad(f, filt.params[name])))
    detail(record_property, f"50 instances, worst {worst:.1e}")
    assert worst < 1e-4


# -- 4. compositing ------------------------------------------------------------------------
@pytest.mark.criterion(4)
def test_rendering_conservation(record_property):
    rng = np.random.default_rng(4)
    cfg = RenderConfig()
    n, s = 10_000, cfg.n_samples
    field_ = RadianceField.init(rng, FieldConfig(dtype="float64"))
    o = rng.normal(size=(n, 3)) * 0.5
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = o[:, None, :] + d[:, None, :] * cfg.sample_depths()[None, :, None]
    sig_field, rgb = field_.forward(Tensor(pts.reshape(-1, 3)), Tensor(np.repeat(d, s, axis=0)))
    # field densities plus a heavy-tailed synthetic set covering transparent through opaque rays
    sig_synth = rng.exponential(size=(n, s)) * 10.0 ** rng.uniform(-4, 2, size=(n, 1))
    worst, lo, hi = 0.0, np.inf, -np.inf
    for sigma in (sig_field.data.reshape(n, s), sig_synth):
        _, opacity, weights = composite(Tensor(sigma), Tensor(rgb.data.reshape(n, s, 3)), cfg.delta, cfg.background)
        t_final = np.prod(1.0 - (1.0 - np.exp(-sigma * cfg.delta)), axis=1)
        worst = max(worst, np.abs(weights.data.sum(axis=1) + t_final - 1.0).max())
        lo, hi = min(lo, opacity.data.min()), max(hi, opacity.data.max())
    detail(record_property, f"2 x 10000 rays, worst {worst:.1e}, opacity in [{lo:.3g}, {hi:.3g}]")
    assert worst < 1e-9
    assert 0.0 <= lo and hi <= 1.0


# -- 5 and 8. end-to-end orbit ----------------------------------------------------------------
@pytest.fixture(scope="module")
def orbit_dataset(tmp_path_factory):
    spec, traj, noise = SceneSpec(), TrajectorySpec(n_frames=12, sweep_deg=90.0), NoiseSpec()
    ds = build_dataset(spec, traj, noise, width=64, height=64, seed=0)
    root = tmp_path_factory.mktemp("orbit") / "dataset"
    write_dataset(root, ds, spec, traj, noise, RenderConfig(), seed=0)
    return root


@pytest.fixture(scope="module")
def orbit_run(orbit_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("orbit") / "run1"
    t0 = time.perf_counter()
    metrics = execute_run(orbit_dataset, out, PipelineConfig(seed=0), deterministic=True)
    return out, metrics, time.perf_counter() - t0


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_end_to_end_orbit(orbit_run, record_property):
    _, m, elapsed = orbit_run
    ratio = m["baseline_dR_deg"] / m["dR_deg"]
    detail(record_property, f"dR {m['dR_deg']:.4f} deg vs identity baseline {m['baseline_dR_deg']:.4f} deg "
                            f"({ratio:.1f}x), dT {m['dT']:.4f}, {elapsed / 60:.1f} min")
    assert m["dR_deg"] * 10.0 <= m["baseline_dR_deg"]
    assert m["dR_deg"] == pytest.approx(PINNED_ORBIT_DR_DEG, rel=1e-6)
    assert m["dT"] == pytest.approx(PINNED_ORBIT_DT, rel=1e-6)


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_determinism(orbit_dataset, orbit_run, tmp_path, record_property):
    first, _, _ = orbit_run
    second = tmp_path / "run2"
    execute_run(orbit_dataset, second, PipelineConfig(seed=0), deterministic=True)
    same = {f: (first / f).read_bytes() == (second / f).read_bytes()
            for f in ("events.ndjson", "trajectory.txt", "metrics.json")}
    n_events = (first / "events.ndjson").read_text().count("\n")
    detail(record_property, f"{n_events} events; " + ", ".join(f"{f} {'identical' if v else 'DIFFERS'}"
                                                              for f, v in same.items()))
    assert all(same.values())


# -- 6. ablations ---------------------------------------------------------------------------
ABLATIONS = {
    "full": {},
    "no_regulation": {"regulation": False},
    "local_only": {"mode": UpdateMode("implicit_local", "SE3")},
    "direct": {"mode": UpdateMode("direct", "SE3")},
    "se3_domain": {"mode": UpdateMode("implicit_local_global", "se3")},
}


@pytest.fixture(scope="module")
def ablation_results():
    n = ABLATION_FRAMES
    ds = build_dataset(SceneSpec(), TrajectorySpec(n_frames=n, sweep_deg=90.0 * (n - 1) / 11), NoiseSpec(),
                       width=64, height=64, seed=0)
    gt = Trajectory(ds.poses)
    out = {}
    for name, kw in ABLATIONS.items():
        scores = []
        for seed in ABLATION_SEEDS:
            res = Pipeline(ds.images, ds.intrinsics, ds.matches, PipelineConfig(seed=seed, **kw)).run()
            scores.append(evaluate_trajectory(Trajectory(res.poses), gt)["dR_deg"])
        out[name] = scores
    return out


def _means(results, *names):
    return [float(np.mean(results[n])) for n in names]


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_ablation_regulation(ablation_results, record_property):
    on, off = _means(ablation_results, "full", "no_regulation")
    detail(record_property, f"regulation on {on:.3f} < off {off:.3f} deg")
    assert on < off


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_ablation_filter(ablation_results, record_property):
    lg, loc, direct = _means(ablation_results, "full", "local_only", "direct")
    detail(record_property, f"local+global {lg:.3f} <= local {loc:.3f} <= direct {direct:.3f} deg")
    assert lg <= loc <= direct


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_ablation_update_domain(ablation_results, record_property):
    se3_group, se3_add = _means(ablation_results, "full", "se3_domain")
    detail(record_property, f"SE3 {se3_group:.3f} <= se3 {se3_add:.3f} deg")
    assert se3_group <= se3_add


# -- 7. metrics ---------------------------------------------------------------------------
@pytest.mark.criterion(7)
def test_metrics_alignment_round_trip(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        gt = Trajectory([Pose(random_rotation(rng), rng.normal(size=3) * 2) for _ in range(10)])
        sim = Similarity(float(rng.uniform(0.2, 5)), random_rotation(rng), rng.normal(size=3) * 3)
        est = sim.apply(gt)
        aligned = align_similarity(est, gt).apply(est)
        worst = max(worst, np.abs(aligned.centers() - gt.centers()).max(),
                    max(np.abs(a.r - b.r).max() for a, b in zip(aligned.poses, gt.poses)))
    detail(record_property, f"100 trajectories, worst residual {worst:.1e}")
    assert worst < 1e-10


@pytest.mark.criterion(7)
def test_metrics_closed_forms(record_property):
    rng = np.random.default_rng(8)
    gt = Trajectory([Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(10)])
    rotated = []
    for p in gt.poses:
        r = axis_angle_rotation(rng.normal(size=3), np.radians(2.0)) @ p.r
        rotated.append(Pose(r, -r @ p.center()))
    d_r, _ = pose_errors(Trajectory(rotated), gt)
    shifted = list(gt.poses)
    off = rng.normal(size=3)
    off *= 0.5 / np.linalg.norm(off)
    shifted[3] = Pose(shifted[3].r, -shifted[3].r @ (shifted[3].center() + off))
    d_r0, d_t = pose_errors(Trajectory(shifted), gt)
    a = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    p20 = psnr(a, a + 0.1)
    detail(record_property, f"2 deg -> {d_r!r}, offset 0.5/10 -> {d_t!r}, PSNR {p20!r}")
    assert abs(d_r - 2.0) < 1e-12
    assert abs(d_t - 0.05) < 1e-12 and d_r0 < 1e-12
    assert abs(p20 - 20.0) < 1e-9
    assert psnr(a, a) == 99.0


def test_identity_baseline_is_what_criterion_5_compares_against():
    gt = Trajectory(build_dataset(SceneSpec(), TrajectorySpec(n_frames=12), NoiseSpec(), width=16, height=16).poses)
    m = evaluate_trajectory(Trajectory(identity_baseline(12)), gt)
    # rotation-only alignment of the identity start: mean angular distance to the mid-orbit orientation
    assert m["alignment"] == "rotation"
    assert 20.0 < m["dR_deg"] < 30.0
