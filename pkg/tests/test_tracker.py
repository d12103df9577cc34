import itertools

import numpy as np
import pytest

from maskmotion.masks import FrameMask, ProbMask
from maskmotion.synth import SceneSpec, ShapeSpec, render_scene
from maskmotion.track import (
    Detection,
    KalmanCV,
    Tracklet,
    TrackerConfig,
    appearance_score,
    compute_metrics,
    fuse_and_assign,
    kalman_score,
    motion_score,
    track_scene,
    track_video,
    unit_embedding,
)


def det(mask_bits=None, emb=(1.0, 0.0), conf=1.0, size=8):
    if mask_bits is None:
        bits = np.zeros((size, size), dtype=np.uint8)
        bits[2:5, 2:5] = 1
    else:
        bits = np.asarray(mask_bits, dtype=np.uint8)
    return Detection(FrameMask(bits), unit_embedding(emb), conf)


def tracklet(track_id=0, emb=(1.0, 0.0), frames=1):
    t = Tracklet(track_id, 0, det(emb=emb))
    for k in range(1, frames):
        t.update(k, det(emb=emb))
    return t


class TestDetection:
    def test_rejects_unnormalized_embedding(self):
        with pytest.raises(ValueError, match="norm"):
            Detection(FrameMask.zeros(4, 4), np.array([1.0, 1.0]))

    def test_zero_embedding_rejected(self):
        with pytest.raises(ValueError):
            unit_embedding((0.0, 0.0))


class TestAppearanceScore:
    def test_singleton_is_one(self):
        s = appearance_score([tracklet()], [det(emb=(0.3, 0.9))])
        assert s.shape == (1, 1)
        assert s[0, 0] == pytest.approx(1.0)

    def test_identical_beats_orthogonal(self):
        ts = [tracklet(0, (1.0, 0.0)), tracklet(1, (0.0, 1.0))]
        ds = [det(emb=(1.0, 0.0)), det(emb=(0.0, 1.0))]
        s = appearance_score(ts, ds)
        assert s[0, 0] > s[0, 1]
        assert s[1, 1] > s[1, 0]
        assert ((0 <= s) & (s <= 1)).all()

    def test_symmetric_inputs_symmetric_matrix(self):
        ts = [tracklet(0, (1.0, 0.0)), tracklet(1, (0.0, 1.0))]
        ds = [det(emb=(1.0, 0.0)), det(emb=(0.0, 1.0))]
        s = appearance_score(ts, ds)
        assert np.allclose(s, s.T)


class TestMotionScore:
    @staticmethod
    def oracle_predictor(target_bits):
        def predict(seq):
            return ProbMask(np.asarray(target_bits, dtype=np.float64))
        return predict

    def test_identical_prediction_scores_one(self):
        bits = np.zeros((8, 8), dtype=np.uint8)
        bits[2:5, 2:5] = 1
        t = tracklet(frames=2)
        s = motion_score(self.oracle_predictor(bits), [t], [det(bits)])
        assert s[0, 0] == 1.0

    def test_disjoint_prediction_scores_zero(self):
        pred_bits = np.zeros((8, 8), dtype=np.uint8)
        pred_bits[6:8, 6:8] = 1
        t = tracklet(frames=2)
        s = motion_score(self.oracle_predictor(pred_bits), [t], [det()])
        assert s[0, 0] == 0.0

    def test_cold_start_row_is_zero(self):
        t = tracklet(frames=1)  # single mask: no motion estimate yet
        s = motion_score(self.oracle_predictor(np.ones((8, 8))), [t], [det()])
        assert (s == 0).all()


class TestFuseAndAssign:
    def test_plain_appearance_assignment(self):
        app = np.array([[0.9, 0.1], [0.2, 0.8]])
        matches, ut, ud = fuse_and_assign(app)
        assert sorted(matches) == [(0, 0), (1, 1)]
        assert ut == [] and ud == []

    def test_motion_breaks_ties(self):
        app = np.full((2, 2), 0.5)
        motion = np.eye(2)
        matches, _, _ = fuse_and_assign(app, motion, weight=1.0)
        assert sorted(matches) == [(0, 0), (1, 1)]

    def test_zero_weight_reduces_to_appearance(self):
        rng = np.random.default_rng(0)
        app = rng.random((3, 3))
        motion = rng.random((3, 3))
        m1, *_ = fuse_and_assign(app, motion, weight=0.0, match_threshold=-1)
        m2, *_ = fuse_and_assign(app, None, match_threshold=-1)
        assert m1 == m2

    def test_threshold_unmatches_low_pairs(self):
        app = np.array([[0.05]])
        matches, ut, ud = fuse_and_assign(app, match_threshold=0.2)
        assert matches == [] and ut == [0] and ud == [0]

    def test_optimality_vs_brute_force(self):
        rng = np.random.default_rng(1)
        for n in (2, 3, 4, 5, 6):
            for _ in range(20):
                fused = rng.random((n, n))
                matches, *_ = fuse_and_assign(fused, match_threshold=-1)
                got = sum(fused[r, c] for r, c in matches)
                best = max(sum(fused[i, p[i]] for i in range(n))
                           for p in itertools.permutations(range(n)))
                assert got == pytest.approx(best, abs=1e-12)

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(2)
        app = rng.random((4, 4))
        m1, *_ = fuse_and_assign(app, match_threshold=-100)
        shifted = app.copy()
        shifted[2, :] += 7.5
        m2, *_ = fuse_and_assign(shifted, match_threshold=-100)
        assert m1 == m2

    def test_top_k_zeroes_low_confidence_rows(self):
        app = np.zeros((3, 1))
        motion = np.ones((3, 1))
        matches, *_ = fuse_and_assign(app, motion, weight=1.0, top_k=1,
                                      confidences=[0.1, 0.9, 0.5], match_threshold=0.5)
        assert matches == [(1, 0)]

    def test_top_k_without_confidences_rejected(self):
        with pytest.raises(ValueError, match="confidences"):
            fuse_and_assign(np.ones((2, 2)), np.ones((2, 2)), top_k=1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fuse_and_assign(np.ones((2, 2)), np.ones((2, 3)))


class TestKalman:
    def test_constant_velocity_exact(self):
        kf = KalmanCV((0.0, 0.0), process_noise=0.0, measurement_noise=0.0)
        kf.predict()
        kf.update((2.0, 3.0))
        assert np.allclose(kf.predict(), (4.0, 6.0), atol=1e-12)
        kf.update((4.0, 6.0))
        assert np.allclose(kf.predict(), (6.0, 9.0), atol=1e-12)

    def test_score_one_at_predicted_center(self):
        t = Tracklet(0, 0, det(), kalman_noise=(0.0, 0.0))
        bits = np.zeros((8, 8), dtype=np.uint8)
        bits[2:5, 2:5] = 1  # same centroid as tracklet's first mask
        s = kalman_score([t], [det(bits)], sigma_d=5.0)
        assert s[0, 0] == pytest.approx(1.0)

    def test_nearer_detection_scores_higher(self):
        t = Tracklet(0, 0, det(), kalman_noise=(0.0, 0.0))
        near = np.zeros((16, 16), dtype=np.uint8)
        near[2:5, 2:5] = 1
        far = np.zeros((16, 16), dtype=np.uint8)
        far[10:13, 10:13] = 1
        s = kalman_score([t], [det(near), det(far)], sigma_d=5.0)
        assert s[0, 0] > s[0, 1]


class TestTrackletLifecycle:
    def test_ids_never_reused(self):
        spec = SceneSpec(
            canvas=(48, 48),
            shapes=(ShapeSpec("disk", 5.0, (12.0, 12.0), (2.0, 1.0)),
                    ShapeSpec("disk", 5.0, (36.0, 36.0), (-2.0, -1.0))),
            num_frames=10, seed=3)
        scene = render_scene(spec)
        assignments, _ = track_scene(scene, TrackerConfig(scorer="appearance"))
        ids_per_frame = [{tid for tid, _, _ in frame} for frame in assignments]
        all_ids = sorted(set().union(*ids_per_frame))
        assert all_ids == list(range(len(all_ids)))

    def test_history_capped_at_five(self):
        t = tracklet(frames=9)
        assert len(t.masks) == 5


class TestTrackVideo:
    @staticmethod
    def make_two_disk_scene(seed=4, equal=False):
        c1 = (200, 40, 40) if not equal else (150, 150, 150)
        c2 = (40, 200, 40) if not equal else (150, 150, 150)
        spec = SceneSpec(
            canvas=(48, 48),
            shapes=(ShapeSpec("disk", 5.0, (12.0, 12.0), (2.5, 1.5), color=c1),
                    ShapeSpec("disk", 5.0, (36.0, 36.0), (-2.5, -1.5), color=c2)),
            num_frames=10, seed=seed)
        return render_scene(spec)

    def test_oracle_metrics_are_perfect(self):
        scene = self.make_two_disk_scene()
        # oracle: assignments that copy the ground-truth identity
        assignments = []
        id_map = {seq.instance_id: i for i, seq in enumerate(scene.masks)}
        for f in range(len(scene.frame_indices)):
            frame = []
            for seq in scene.masks:
                if not seq.frames[f].is_empty():
                    frame.append((id_map[seq.instance_id], seq.instance_id, seq.frames[f]))
            assignments.append(frame)
        m = compute_metrics(scene, assignments)
        assert m["IDSw"] == 0
        assert m["IDF1"] == pytest.approx(1.0)
        assert m["MOTSA"] == pytest.approx(1.0)
        assert m["mean_iou"] == pytest.approx(1.0)

    def test_distinct_colors_track_cleanly(self):
        scene = self.make_two_disk_scene()
        out = track_video(scene, TrackerConfig(scorer="appearance", embed_noise=0.03))
        assert out["metrics"]["IDSw"] == 0
        assert out["metrics"]["IDF1"] > 0.95

    def test_idsw_counted_on_forced_swap(self):
        scene = self.make_two_disk_scene()
        # build assignments that swap the two track ids halfway
        assignments = []
        for f in range(len(scene.frame_indices)):
            swap = f >= len(scene.frame_indices) // 2
            frame = []
            for g, seq in enumerate(scene.masks):
                if seq.frames[f].is_empty():
                    continue
                tid = g if not swap else 1 - g
                frame.append((tid, seq.instance_id, seq.frames[f]))
            assignments.append(frame)
        m = compute_metrics(scene, assignments)
        assert m["IDSw"] == 2
        assert m["IDF1"] < 1.0

    def test_motion_scorer_requires_model(self):
        scene = self.make_two_disk_scene()
        with pytest.raises(ValueError, match="motion model"):
            track_video(scene, TrackerConfig(scorer="+motion"))

    def test_empty_scene_rejected(self):
        scene = self.make_two_disk_scene()
        object.__setattr__(scene, "masks", ())
        with pytest.raises(ValueError):
            track_video(scene, TrackerConfig())

    def test_empty_split_rejected(self, tmp_path):
        from maskmotion.synth import make_benchmark_suite, load_dataset
        from maskmotion.track import track_dataset
        make_benchmark_suite("translation", 1, 0, tmp_path / "d", canvas=(32, 32), num_frames=8)
        ds = load_dataset(tmp_path / "d")
        with pytest.raises(ValueError, match="no scenes"):
            track_dataset(ds, TrackerConfig(), split="val")
