import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surfel_track.dataset import (
    GroundTruthTable,
    load_dataset,
    pose_to_row,
    read_kv,
    read_results,
    read_trajectory,
    row_to_pose,
    write_dataset,
    write_kv,
    write_results,
    write_trajectory,
)
from surfel_track.errors import DatasetError
from surfel_track.evaluation import (
    TrackArrays,
    evaluate,
    roc_auc,
    roc_sweep,
    surfel_rmse,
    trajectory_ate,
    traveled_distance,
)
from surfel_track.geometry import Pose, SurfelState, se3_exp
from surfel_track.synth import make_scene, select_anchors
from surfel_track.tracker import FrameResult, SurfelResult


# --- small text formats ----------------------------------------------------------

def test_kv_round_trip(tmp_path):
    write_kv(tmp_path / "a.cfg", {"fx": 500.0, "name": "x", "missing": (1, 2), "n": 3})
    (tmp_path / "a.cfg").write_text((tmp_path / "a.cfg").read_text() + "# note\n\nextra = 1 # trailing\n")
    assert read_kv(tmp_path / "a.cfg") == {"fx": "500.0", "name": "x", "missing": "1,2", "n": "3", "extra": "1"}


def test_kv_rejects_garbage(tmp_path):
    (tmp_path / "b.cfg").write_text("just words\n")
    with pytest.raises(DatasetError):
        read_kv(tmp_path / "b.cfg")


def test_trajectory_is_camera_to_world(tmp_path, rng):
    poses = [se3_exp(rng.normal(size=6) * 0.3) for _ in range(5)]
    row = pose_to_row(poses[0])
    assert np.allclose(row[:3], poses[0].center())
    assert row[3] >= 0
    q = Rotation.from_matrix(poses[0].rotation.T).as_quat()
    assert np.allclose(np.abs(row[4:] + [row[3]]), np.abs(q[[0, 1, 2, 3]]))
    write_trajectory(tmp_path / "t.csv", range(5), poses)
    frames, back = read_trajectory(tmp_path / "t.csv")
    assert frames == list(range(5))
    for p, b in zip(poses, back):
        assert np.allclose(p.matrix(), b.matrix(), atol=1e-12)
    assert np.allclose(row_to_pose(row).matrix(), poses[0].matrix(), atol=1e-12)


# --- datasets ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    scene = make_scene("rigid_plane", 2, n_frames=4)
    pixels, anchors = select_anchors(scene, spacing=120)
    files = write_dataset(scene, out, pixels, anchors)
    return out, scene, pixels, anchors, files


def test_dataset_round_trip(small_dataset):
    from surfel_track.synth import gt_surfel_track, render_frame

    out, scene, pixels, anchors, files = small_dataset
    assert sorted(files) == sorted(["depth_00000.pgm", "intrinsics.cfg", "anchors.csv", "gt_trajectory.csv",
                                    "gt_surfels.csv"] + [f"frame_{i:05d}.pgm" for i in range(4)])
    ds = load_dataset(out)
    assert ds.frames == [0, 1, 2, 3] and ds.size == (640, 480)
    assert ds.intrinsics == scene.intrinsics
    assert [(x, y) for _, x, y in ds.anchors] == [tuple(map(float, p)) for p in pixels]
    img, _ = render_frame(scene, 2.0)
    assert np.abs(ds.image(2) - img).max() <= 0.5 / 65535 + 1e-12
    scale = float(ds.config["depth_scale"])
    _, depth = render_frame(scene, 0.0)
    assert np.array_equal(ds.depth.valid, depth.valid)
    assert np.abs(ds.depth.depths - depth.depths)[depth.valid].max() <= scale
    gt, ref = ds.ground_truth(), gt_surfel_track(scene, anchors, range(4))
    assert np.allclose(gt.positions, ref.positions, rtol=0, atol=1e-15)
    assert np.array_equal(gt.visible, ref.visible)
    assert np.allclose([p.matrix() for p in gt.poses], [p.matrix() for p in ref.poses], atol=1e-12)


@pytest.mark.parametrize("broken", ["no_dir", "no_cfg", "no_frames", "no_key"])
def test_dataset_errors(tmp_path, broken):
    root = tmp_path / "d"
    if broken != "no_dir":
        root.mkdir()
    if broken in ("no_frames", "no_key"):
        write_kv(root / "intrinsics.cfg", {"fx": 1, "fy": 1, "cx": 0} if broken == "no_key"
                 else {"fx": 1, "fy": 1, "cx": 0, "cy": 0})
    if broken == "no_key":
        from surfel_track.imaging import save_gray
        save_gray(root / "frame_00000.pgm", np.zeros((4, 4)))
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_results_round_trip(tmp_path, rng):
    from surfel_track.geometry import Surfel

    surfels = [Surfel(i, rng.normal(size=3) + [0, 0, 2], np.eye(3, 2) * 0.003) for i in (4, 1)]
    frames = []
    for f in range(3):
        srs = [SurfelResult(s.id, SurfelState(translation=rng.normal(size=3) * 0.01), 0.9 + 0.01 * f, f != 1,
                            0.01 * f, SurfelState(translation=rng.normal(size=3))) for s in surfels]
        frames.append(FrameResult(f, se3_exp(rng.normal(size=6) * 0.1), srs))
    write_results(tmp_path, frames, surfels)
    arr = read_results(tmp_path)
    assert arr.frames == [0, 1, 2] and arr.ids == [1, 4]
    from surfel_track.evaluation import collect
    ref = collect(frames, surfels)
    for name in ("position", "solved_position", "zncc", "residual_rms", "poses"):
        assert np.allclose(getattr(arr, name), getattr(ref, name), atol=1e-15), name
    assert np.array_equal(arr.inlier, ref.inlier)
    with pytest.raises(DatasetError):
        read_results(tmp_path / "missing")


# --- metrics --------------------------------------------------------------------------

def _gt(F=4, N=3, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(F, N, 3)) * 0.1 + [0, 0, 2.0]
    poses = [se3_exp(np.r_[0.01 * f, 0.0, 0.0, 0.0, 0.0, 0.0]) for f in range(F)]
    return GroundTruthTable(list(range(F)), poses, list(range(N)), pos, np.zeros((F, N, 3, 2)),
                            np.ones((F, N), bool))


def _arrays_from(gt, offset=None, inlier=None):
    F, N = gt.positions.shape[:2]
    pos = gt.positions.copy()
    if offset is not None:
        pos = pos + offset
    return TrackArrays(list(gt.frames), list(gt.anchor_ids), pos, pos.copy(),
                       np.ones((F, N), bool) if inlier is None else inlier,
                       np.ones((F, N)), np.zeros((F, N)), np.array([p.matrix34() for p in gt.poses]))


def test_perfect_results_score_zero():
    gt = _gt()
    m = evaluate(_arrays_from(gt), gt)
    assert m["rmse_mean"] == 0.0 and m["ate"] == 0.0
    assert m["traveled"] == pytest.approx(0.03)
    assert m["frames_processed"] == 4


def test_unit_offset_on_one_surfel():
    gt = _gt()
    off = np.zeros_like(gt.positions)
    off[:, 1] = [0.6, 0.0, 0.8]
    rmse = surfel_rmse(_arrays_from(gt, off), gt.frames, gt.anchor_ids, gt.positions)
    assert rmse == {0: 0.0, 1: pytest.approx(1.0), 2: 0.0}


def test_rmse_skips_outlier_and_hidden_frames():
    gt = _gt()
    off = np.zeros_like(gt.positions)
    off[2, 0] = [5.0, 0, 0]
    inl = np.ones((4, 3), bool)
    inl[2, 0] = False
    assert surfel_rmse(_arrays_from(gt, off, inl), gt.frames, gt.anchor_ids, gt.positions)[0] == 0.0
    vis = np.ones((4, 3), bool)
    vis[2, 0] = False
    assert surfel_rmse(_arrays_from(gt, off), gt.frames, gt.anchor_ids, gt.positions, vis)[0] == 0.0
    none = np.zeros((4, 3), bool)
    assert np.isnan(surfel_rmse(_arrays_from(gt, None, none), gt.frames, gt.anchor_ids, gt.positions)[1])


def test_ate_and_distance():
    gt = [Pose.identity(), Pose(translation=[-1.0, 0, 0]), Pose(translation=[-1.0, -1.0, 0])]
    est = [Pose.identity(), Pose(translation=[-1.0, 0, 0]), Pose(translation=[-1.0, -1.0, -3.0])]
    m = lambda ps: np.array([p.matrix34() for p in ps])  # noqa: E731
    assert traveled_distance(m(gt)) == pytest.approx(2.0)
    assert trajectory_ate(m(est), m(gt)) == pytest.approx(np.sqrt(9.0 / 3))


def test_roc_of_perfect_classifier():
    scores = np.array([0.99, 0.98, 0.97, 0.5, 0.4])
    labels = np.array([1, 1, 1, 0, 0], bool)
    rows = roc_sweep(scores, labels)
    assert rows[0][1:] == (0.0, 0.0) and rows[-1][1:] == (1.0, 1.0)
    assert roc_auc(rows) == pytest.approx(1.0)
    assert all(t1 >= t2 for (t1, _, _), (t2, _, _) in zip(rows, rows[1:]))


def test_roc_matches_rank_statistic(rng):
    scores = rng.random(200)
    labels = rng.random(200) < scores  # informative but noisy
    pos, neg = scores[labels], scores[~labels]
    mann_whitney = np.mean((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :]))
    assert roc_auc(roc_sweep(scores, labels)) == pytest.approx(mann_whitney, abs=1e-12)


def test_roc_fixed_thresholds():
    rows = roc_sweep([0.2, 0.8], [False, True], thresholds=[0.0, 0.5, 1.0])
    assert rows == [(1.0, 0.0, 0.0), (0.5, 1.0, 0.0), (0.0, 1.0, 1.0)]


def test_evaluate_labels_use_error_threshold():
    gt = _gt()
    off = np.zeros_like(gt.positions)
    off[1:, 2] = [0.5, 0, 0]
    arr = _arrays_from(gt, off)
    arr.zncc[1:, 2] = 0.3
    m = evaluate(arr, gt, error_threshold=0.1)
    assert m["roc_negatives"] == 3 and m["roc_positives"] == 9
    assert m["roc_auc"] == pytest.approx(1.0)
    assert np.isnan(evaluate(_arrays_from(gt), gt)["roc_auc"])  # one class only
