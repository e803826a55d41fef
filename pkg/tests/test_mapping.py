import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panoslam.config import MappingConfig
from panoslam.mapping import (Keyframe, WindowItem, densification_mask, densify, loss_and_grads,
                              map_update_step, new_optimizer, photometric_loss, sample_frame_points,
                              select_keyframes, total_loss)
from panoslam.panoptic import PanopticHead
from panoslam.render import RenderOutput, project_all, render
from panoslam.scene import CameraPose, Frame, GaussianMap, Intrinsics, init_map_from_first_frame, quat_normalize
from panoslam.synthetic import SceneSpec, TrajectorySpec, make_sequence
from scenes import random_scene

seeds = st.integers(0, 2**32 - 1)
INTR = Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16)


def _output(sil, depth, ssil=None):
    H, W = depth.shape
    return RenderOutput(np.zeros((H, W, 3)), depth, sil, np.zeros((H, W, 3)), sil if ssil is None else ssil)


def _frame(depth, rng=None):
    rng = rng or np.random.default_rng(0)
    return Frame(rng.uniform(size=depth.shape + (3,)), depth)


def test_empty_render_flags_every_valid_pixel():
    depth = np.random.default_rng(0).uniform(1, 2, (16, 16))
    depth[0, :4] = 0
    frame = _frame(depth)
    mask = densification_mask(render(GaussianMap(), CameraPose(), INTR), frame)
    assert mask[frame.valid].all()


def test_converged_render_flags_nothing():
    depth = np.full((8, 8), 2.0)
    out = _output(np.full((8, 8), 0.995), depth + 0.001)
    assert not densification_mask(out, _frame(depth)).any()


def test_depth_outlier_is_flagged():
    rng = np.random.default_rng(1)
    depth = np.full((8, 8), 2.0)
    err = rng.uniform(0.001, 0.002, (8, 8))
    err[3, 4] = 100 * np.median(err)
    mask = densification_mask(_output(np.ones((8, 8)), depth + err), _frame(depth))
    assert mask.sum() == 1 and mask[3, 4]


@given(seeds, st.floats(0, 5))
def test_mask_monotone_in_depth_error(seed, extra):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(1, 2, (8, 8)) * (rng.uniform(size=(8, 8)) > 0.2)
    frame = _frame(depth, rng)
    rendered = depth + rng.normal(scale=0.01, size=(8, 8))
    sil = rng.uniform(0.3, 1, (8, 8))
    before = densification_mask(_output(sil, rendered), frame)
    y, x = rng.integers(0, 8, 2)
    bumped = rendered.copy()
    bumped[y, x] += np.sign(bumped[y, x] - depth[y, x] or 1.0) * extra
    after = densification_mask(_output(sil, bumped), frame)
    assert after[y, x] or not before[y, x]


def test_densify_counts_and_reprojects():
    rng = np.random.default_rng(2)
    depth = rng.uniform(1, 3, (16, 16))
    depth[5, 5] = 0
    frame = _frame(depth, rng)
    pose = CameraPose(quat_normalize([1, 0.1, -0.05, 0.02]), [0.1, 0.2, -0.3])
    m = GaussianMap()
    assert len(densify(m, frame, np.zeros((16, 16), bool), pose, INTR)) == 0
    mask = rng.uniform(size=(16, 16)) < 0.3
    grown = densify(m, frame, mask, pose, INTR)
    assert len(grown) == int((mask & frame.valid).sum())
    _, mean2d, *_ = project_all(grown, pose, INTR)
    v, u = np.nonzero(mask & frame.valid)
    assert np.abs(mean2d - np.column_stack([u, v])).max() < 1e-6


def _keyframes(rng, n, frame):
    kfs = []
    for i in range(n):
        q = quat_normalize(np.r_[1.0, rng.normal(scale=0.4, size=3)])
        kfs.append(Keyframe(i * 5, CameraPose(q, rng.normal(scale=0.8, size=3)), frame))
    return kfs


def brute_force_scores(points, keyframes, intr):
    K = intr.K
    scores = []
    for kf in keyframes:
        c = 0
        for p in points:
            x = kf.pose.matrix()[:3, :3] @ p + kf.pose.translation
            if x[2] <= 0.01:
                continue
            u, v, w = K @ x
            if -0.5 <= u / w < intr.width - 0.5 and -0.5 <= v / w < intr.height - 0.5:
                c += 1
        scores.append(c)
    return scores


def test_no_keyframes_gives_current_only():
    frame = _frame(np.ones((16, 16)))
    assert select_keyframes(frame, CameraPose(), [], INTR, 4) == []


def test_duplicate_frame_is_selected():
    rng = np.random.default_rng(3)
    frame = _frame(rng.uniform(1, 2, (16, 16)), rng)
    kfs = _keyframes(rng, 5, frame)
    pose = CameraPose(quat_normalize([1, 0.3, 0.2, 0.1]), [0.5, 0.1, 0.2])
    kfs.insert(2, Keyframe(99, pose, frame))
    assert select_keyframes(frame, pose, kfs, INTR, 2)[0].index == 99


@pytest.mark.parametrize("seed", range(50))
def test_selection_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    frame = _frame(rng.uniform(0.5, 3, (16, 16)) * (rng.uniform(size=(16, 16)) > 0.1), rng)
    kfs = _keyframes(rng, int(rng.integers(1, 7)), frame)
    pose = CameraPose(quat_normalize(np.r_[1.0, rng.normal(scale=0.3, size=3)]), rng.normal(scale=0.3, size=3))
    window = int(rng.integers(1, 6))
    pts = sample_frame_points(frame, pose, INTR, max_points=100, seed=seed)
    scores = brute_force_scores(pts, kfs, INTR)
    ranked = sorted([(s, kf.index) for s, kf in zip(scores, kfs) if s > 0], key=lambda t: (-t[0], -t[1]))
    expected = [i for _, i in ranked[:window - 1]]
    got = select_keyframes(frame, pose, kfs, INTR, window, max_points=100, seed=seed)
    assert [kf.index for kf in got] == expected


def test_scores_stable_under_subsampling_seed():
    seq = make_sequence(traj_spec=TrajectorySpec(n_frames=6), seed=0)
    frame, pose = seq.frames[5], seq.gt_poses[5]
    kf = seq.gt_poses[0]
    from panoslam.mapping import frustum_count
    counts = [frustum_count(sample_frame_points(frame, pose, seq.intrinsics, 1024, s), kf, seq.intrinsics)
              for s in range(5)]
    assert (max(counts) - min(counts)) <= 0.02 * 1024 * 2


def test_photometric_reduction():
    frame = Frame(np.zeros((2, 2, 3)), np.ones((2, 2)))
    out = RenderOutput(np.full((2, 2, 3), 0.5), np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2, 3)),
                       np.ones((2, 2)))
    color, depth, _, _ = photometric_loss(out, frame, MappingConfig())
    assert color == pytest.approx(1.5) and depth == 0.0


def _labeled_window(rng, gmap, pose, intr, head, n_pseudo=3):
    H, W = intr.shape
    frame = Frame(rng.uniform(size=(H, W, 3)), rng.uniform(1.5, 3, (H, W)))
    regions = np.zeros((H, W, head.n_regions))
    lab = rng.integers(0, n_pseudo, (H, W))
    regions[np.arange(H)[:, None], np.arange(W)[None, :], lab] = 1.0
    regions[rng.uniform(size=(H, W)) < 0.2] = 0
    classes = np.zeros((head.n_regions, head.n_classes))
    classes[np.arange(head.n_regions), rng.integers(0, head.n_classes, head.n_regions)] = 1.0
    return [WindowItem(frame, pose, regions, classes)]


def test_perfect_render_has_zero_photometric_terms():
    m, pose, intr = random_scene(np.random.default_rng(4))
    out = render(m, pose, intr)
    frame = Frame(out.color, out.depth)
    terms = total_loss(m, PanopticHead.create(4, 3, 5), [WindowItem(frame, pose)], intr)
    assert terms.color == 0 and terms.depth == 0 and terms.total == 0


def test_loss_linear_in_depth_weight():
    rng = np.random.default_rng(5)
    m, pose, intr = random_scene(rng)
    head = PanopticHead.create(4, 3, 5, seed=1)
    win = _labeled_window(rng, m, pose, intr, head)
    a = total_loss(m, head, win, intr, MappingConfig())
    b = total_loss(m, head, win, intr, MappingConfig(depth_weight=2.0))
    assert b.total - a.total == pytest.approx(a.depth)
    photo = total_loss(m, head, win, intr, MappingConfig(class_weight=0, dice_weight=0, focal_weight=0))
    assert photo.total == pytest.approx(photo.color + photo.depth)
    assert total_loss(m, head, win, intr, panoptic=False).total == pytest.approx(photo.total)


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m, pose, intr = random_scene(rng)
    head = PanopticHead.create(4, 3, 5, seed=seed)
    win = _labeled_window(rng, m, pose, intr, head)
    cfg = MappingConfig()
    _, g_map, g_head = loss_and_grads(m, head, win, intr, cfg)
    h = 1e-6
    checked = 0
    for name, arr in list(m.params().items()) + list(head.params().items()):
        grads = g_map.get(name) if name in g_map else getattr(g_head, name)
        for idx in list(np.ndindex(arr.shape))[:12]:
            x0 = arr[idx]
            arr[idx] = x0 + h
            lp = total_loss(m, head, win, intr, cfg).total
            arr[idx] = x0 - h
            lm = total_loss(m, head, win, intr, cfg).total
            arr[idx] = x0
            assert grads[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-3, abs=1e-6), (name, idx)
            checked += 1
    assert checked > 100


def test_zero_gradients_leave_parameters_unchanged():
    m, pose, intr = random_scene(np.random.default_rng(6))
    head = PanopticHead.create(4, 3, 5)
    out = render(m, pose, intr)
    before, head_before = m.copy(), head.copy()
    cfg = MappingConfig()
    res = map_update_step(m, head, [WindowItem(Frame(out.color, out.depth), pose)], intr, cfg, new_optimizer(cfg))
    assert res.status == "ok" and res.loss == 0
    assert m.equals(before)
    assert all(np.array_equal(a, b) for a, b in zip(head.params().values(), head_before.params().values()))


def test_nan_label_rejects_step_and_halves_rates():
    rng = np.random.default_rng(7)
    m, pose, intr = random_scene(rng)
    head = PanopticHead.create(4, 3, 5)
    win = _labeled_window(rng, m, pose, intr, head)
    win[0].regions[3, 3, 0] = np.nan
    cfg = MappingConfig()
    opt = new_optimizer(cfg)
    before = m.copy()
    res = map_update_step(m, head, win, intr, cfg, opt)
    assert res.status == "rejected"
    assert m.equals(before)
    assert opt.lrs["centers"] == cfg.lr_centers / 2


@pytest.mark.slow
def test_loss_mostly_decreases_on_two_object_scene():
    seq = make_sequence(SceneSpec(n_objects=2, n_classes=4), TrajectorySpec(n_frames=1), seed=3)
    frame = seq.frames[0]
    gmap = init_map_from_first_frame(frame, seq.intrinsics)
    head = PanopticHead.create(8, 4, 8)
    cfg = MappingConfig()
    from panoslam.mapping import align_pseudo_labels
    out = render(gmap, CameraPose(), seq.intrinsics, retain=False)
    regions, classes = align_pseudo_labels(head, out.semantic, frame, cfg)
    win = [WindowItem(frame, CameraPose(), regions, classes)]
    opt = new_optimizer(cfg)
    losses = [map_update_step(gmap, head, win, seq.intrinsics, cfg, opt).loss for _ in range(200)]
    steps = np.diff(losses)
    assert np.mean(steps <= 0) >= 0.95
