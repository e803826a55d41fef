import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metric_oracles import brute_force_pq
from panoslam.metrics import (VOID, Confusion, EvalReport, MetricContractError, PQStat, ate_rmse, depth_l1,
                              miou, panoptic_quality, psnr, ssim)
from panoslam.scene import CameraPose, quat_normalize, quat_to_rotmat

seeds = st.integers(0, 2**32 - 1)


def _rigid(rng):
    return quat_to_rotmat(quat_normalize(rng.normal(size=4))), rng.normal(size=3)


def test_ate_identical_is_zero():
    xyz = np.random.default_rng(0).normal(size=(10, 3))
    assert ate_rmse(xyz, xyz) == pytest.approx(0, abs=1e-9)


@given(seeds)
def test_ate_ignores_rigid_offset(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(8, 3))
    R, t = _rigid(rng)
    assert ate_rmse(gt @ R.T + t, gt) == pytest.approx(0, abs=1e-7)


@given(seeds)
def test_ate_invariant_to_common_transform(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(8, 3))
    est = gt + rng.normal(scale=0.01, size=(8, 3))
    R, t = _rigid(rng)
    assert ate_rmse(est @ R.T + t, gt @ R.T + t) == pytest.approx(ate_rmse(est, gt), rel=1e-6)


def test_ate_three_pose_outlier():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    est = gt.copy()
    est[2, 0] += 0.01
    # best rigid fit only shifts along the line: residuals -1/3, -1/3, 2/3 cm
    expected = np.sqrt(((1 / 3) ** 2 * 2 + (2 / 3) ** 2) / 3)
    assert ate_rmse(est, gt) == pytest.approx(expected, rel=1e-6)


def test_ate_accepts_poses_and_checks_lengths():
    poses = [CameraPose(translation=[i, 0, 0]) for i in range(3)]
    assert ate_rmse(poses, poses) == pytest.approx(0, abs=1e-9)
    with pytest.raises(MetricContractError):
        ate_rmse(poses, poses[:2])


def test_depth_l1_cases():
    gt = np.full((4, 4), 2.0)
    assert depth_l1(gt, gt) == 0
    assert depth_l1(gt + 0.01, gt) == pytest.approx(1.0)


@given(seeds)
def test_depth_l1_matches_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 3, (6, 7)) * (rng.uniform(size=(6, 7)) > 0.3)
    gt[0, 0] = 1.0
    d = rng.uniform(0, 3, (6, 7))
    errs = [abs(d[i, j] - gt[i, j]) for i in range(6) for j in range(7) if gt[i, j] > 0]
    assert depth_l1(d, gt) == pytest.approx(100 * sum(errs) / len(errs))


def test_psnr_and_ssim_basics():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0)
    assert psnr(img, img) == float("inf")
    gt = np.zeros((4, 4))
    assert psnr(np.full((4, 4), 0.1), gt) == pytest.approx(20.0)


def test_ssim_constant_images():
    x, y = 0.25, 0.75
    c1 = 0.01 ** 2
    expected = (2 * x * y + c1) / (x * x + y * y + c1)
    assert ssim(np.full((16, 16, 3), x), np.full((16, 16, 3), y)) == pytest.approx(expected, rel=1e-9)


def test_ssim_needs_a_full_window():
    with pytest.raises(MetricContractError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_miou_cases():
    gt = np.array([[0, 0], [1, 1]])
    assert miou(gt, gt, 2) == 100
    assert miou(np.zeros((2, 2), int), np.ones((2, 2), int), 2) == 0


def test_miou_hand_counted():
    gt = np.array([[0, 0, 0, 0], [0, 0, 1, 1], [1, 1, 1, 1], [-1, -1, 1, 1]])
    pred = np.array([[0, 0, 0, 1], [0, -1, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]])
    # class 0: 6 gt pixels, tp 4, fp 1 -> 4/7.  class 1: 8 gt pixels, tp 7, fp 1 -> 7/9.
    assert miou(pred, gt, 2) == pytest.approx(100 * (4 / 7 + 7 / 9) / 2)
    conf = Confusion(2)
    conf.add(pred, gt)
    assert conf.matrix.tolist() == [[4, 1], [1, 7]] and conf.missed.tolist() == [1, 0]


def _ids(cls, inst):
    return (np.asarray(cls, dtype=np.uint32) << np.uint32(16)) | np.asarray(inst, dtype=np.uint32)


def test_pq_identity():
    gt = _ids([[0, 0], [1, 1]], [[1, 1], [2, 2]])
    assert panoptic_quality(gt, gt) == (100.0, 100.0, 100.0)


def test_pq_no_match_is_zero():
    gt = _ids(np.zeros((4, 4), int), np.arange(16).reshape(4, 4) // 4)
    pred = _ids(np.zeros((4, 4), int), np.arange(16).reshape(4, 4) % 4)
    assert panoptic_quality(pred, gt)[0] == 0


def _random_panoptic(rng, n_seg, void_frac=0.1):
    segs = [(int(rng.integers(0, 3)), int(rng.integers(0, 5))) for _ in range(n_seg)]
    lab = rng.integers(0, n_seg, (8, 8))
    if rng.uniform() < 0.7:
        lab = np.sort(lab, axis=int(rng.integers(0, 2)))
    ids = np.array([[_ids(*segs[k]) for k in row] for row in lab], dtype=np.uint32)
    ids[rng.uniform(size=(8, 8)) < void_frac] = VOID
    return ids


@settings(max_examples=200)
@given(seeds)
def test_pq_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = _random_panoptic(rng, int(rng.integers(1, 5)))
    pred = gt.copy() if rng.uniform() < 0.5 else _random_panoptic(rng, int(rng.integers(1, 5)))
    noise = rng.uniform(size=(8, 8)) < 0.15
    pred[noise] = _random_panoptic(rng, 3, 0.2)[noise]
    stat = PQStat()
    stat.add(pred, gt)
    got = stat.per_class()
    want = brute_force_pq(pred, gt)
    assert got.keys() == want.keys()
    for c in want:
        assert np.allclose(got[c], want[c], atol=1e-9)


@given(seeds)
def test_metrics_invariant_to_instance_relabeling(seed):
    rng = np.random.default_rng(seed)
    gt = _random_panoptic(rng, 4)
    pred = _random_panoptic(rng, 4)
    lut = {int(v): (int(v) & 0xFFFF0000) | int(rng.integers(100, 60000)) for v in np.unique(pred) if v != VOID}
    relabeled = np.vectorize(lambda v: lut.get(int(v), int(v)), otypes=[np.uint32])(pred)
    if len(set(lut.values())) < len(lut):
        return
    assert panoptic_quality(relabeled, gt) == panoptic_quality(pred, gt)


@given(seeds)
def test_at_most_one_match_per_segment(seed):
    rng = np.random.default_rng(seed)
    gt = _random_panoptic(rng, 4, 0.0)
    pred = _random_panoptic(rng, 4, 0.0)
    for g in np.unique(gt):
        ious = [((gt == g) & (pred == p)).sum() / ((gt == g) | (pred == p)).sum() for p in np.unique(pred)]
        assert sum(i > 0.5 for i in ious) <= 1


def test_report_round_trip():
    rep = EvalReport(ate_rmse_cm=0.5, depth_l1_cm=0.3, psnr_db=30.0, ssim=0.9, miou_percent=91.0, pq=80.0,
                     sq=85.0, rq=90.0, n_frames=50, n_keyframes=10, per_class_pq={1: (80.0, 85.0, 90.0)})
    assert EvalReport.from_dict(rep.to_dict()) == rep
