"""Tracking-by-detection harness with motion-score fusion.

Per frame, detections are associated to live tracklets by a bi-softmax
appearance score, optionally fused with a motion score: the IoU between
each tracklet's predicted next-frame mask and the candidate detection mask.
A constant-velocity Kalman filter on mask centroids is the classic baseline
scorer. Metrics follow the MOTS conventions (IDSw, IDF1, MOTSA, mean
matched IoU) with the simplifications documented on compute_metrics.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from maskmotion.masks import FrameMask, MaskSequence, ProbMask, binarize, encode_runs, mask_iou

EMBED_NORM_TOL = 1e-6

# ProbMask-producing forecaster over a tracklet's recent masks
MotionModel = Callable[[MaskSequence], ProbMask]


@dataclass(frozen=True)
class Detection:
    mask: FrameMask
    appearance: np.ndarray
    confidence: float = 1.0
    class_id: int | None = None

    def __post_init__(self):
        emb = np.ascontiguousarray(self.appearance, dtype=np.float64)
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > EMBED_NORM_TOL:
            raise ValueError(f"appearance embedding norm {norm:.8f} is not 1 within {EMBED_NORM_TOL}")
        emb.setflags(write=False)
        object.__setattr__(self, "appearance", emb)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


def unit_embedding(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < EMBED_NORM_TOL:
        raise ValueError("zero-norm embedding cannot be normalized")
    return v / norm


class KalmanCV:
    """Constant-velocity Kalman filter on a mask centroid (cx, cy, vx, vy)."""

    F = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=np.float64)
    H = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.float64)

    def __init__(self, center, process_noise: float = 1e-2, measurement_noise: float = 1.0,
                 init_velocity_var: float = 1e4):
        self.x = np.array([center[0], center[1], 0.0, 0.0])
        self.P = np.diag([measurement_noise, measurement_noise,
                          init_velocity_var, init_velocity_var]).astype(np.float64)
        self.Q = process_noise * np.eye(4)
        self.R = measurement_noise * np.eye(2)
        self.updates = 1

    def predict(self) -> np.ndarray:
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        return self.x[:2].copy()

    def update(self, center) -> None:
        z = np.asarray(center, dtype=np.float64)
        S = self.H @ self.P @ self.H.T + self.R
        # with all noise at zero the state becomes exactly determined and S
        # collapses; the pseudo-inverse then yields the correct no-op gain
        try:
            K = self.P @ self.H.T @ np.linalg.inv(S)
        except np.linalg.LinAlgError:
            K = self.P @ self.H.T @ np.linalg.pinv(S)
        self.x = self.x + K @ (z - self.H @ self.x)
        self.P = (np.eye(4) - K @ self.H) @ self.P
        self.updates += 1

    @property
    def center(self) -> np.ndarray:
        return self.x[:2].copy()


class Tracklet:
    """Identity-carrying history: recent masks, running appearance, counters."""

    MAX_HISTORY = 5

    def __init__(self, track_id: int, frame_index: int, det: Detection,
                 kalman_noise: tuple[float, float] | None = None):
        self.track_id = track_id
        self.masks: deque[tuple[int, FrameMask]] = deque(maxlen=self.MAX_HISTORY)
        self.masks.append((frame_index, det.mask))
        self._embed_sum = det.appearance.copy()
        self._embed_count = 1
        self.confidence = det.confidence
        self.age = 1
        self.missed = 0
        self.kalman: KalmanCV | None = None
        if kalman_noise is not None:
            c = det.mask.centroid()
            if c is not None:
                self.kalman = KalmanCV((c[1], c[0]),
                                       process_noise=kalman_noise[0],
                                       measurement_noise=kalman_noise[1])

    @property
    def appearance(self) -> np.ndarray:
        return unit_embedding(self._embed_sum / self._embed_count)

    def history_sequence(self) -> MaskSequence | None:
        if len(self.masks) < 2:
            return None
        frames = tuple(m for _, m in self.masks)
        indices = tuple(t for t, _ in self.masks)
        return MaskSequence(f"track{self.track_id}", frames, indices)

    def update(self, frame_index: int, det: Detection) -> None:
        self.masks.append((frame_index, det.mask))
        self._embed_sum += det.appearance
        self._embed_count += 1
        self.confidence = 0.9 * self.confidence + 0.1 * det.confidence
        self.missed = 0
        self.age += 1
        if self.kalman is not None:
            c = det.mask.centroid()
            if c is not None:
                self.kalman.update((c[1], c[0]))

    def coast(self, frame_index: int, predicted: FrameMask | None) -> None:
        """Unmatched this frame: age, and optionally extend the history with
        the motion forecast so the next prediction keeps extrapolating."""
        self.missed += 1
        self.age += 1
        if predicted is not None:
            self.masks.append((frame_index, predicted))


def appearance_score(tracklets: Sequence[Tracklet], detections: Sequence[Detection]) -> np.ndarray:
    """Bi-softmax over cosine similarities.

    Half the softmax across detections plus half the softmax across
    tracklets; the symmetric score of the contrastive-embedding trackers.
    """
    if not tracklets or not detections:
        return np.zeros((len(tracklets), len(detections)))
    t_emb = np.stack([t.appearance for t in tracklets])
    d_emb = np.stack([d.appearance for d in detections])
    cos = t_emb @ d_emb.T

    def softmax(m, axis):
        e = np.exp(m - m.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    return 0.5 * (softmax(cos, axis=1) + softmax(cos, axis=0))


def motion_score(predict: MotionModel, tracklets: Sequence[Tracklet],
                 detections: Sequence[Detection], threshold: float = 0.5) -> np.ndarray:
    """IoU between each tracklet's predicted next mask and each detection.

    Tracklets with fewer than 2 history masks have no motion estimate yet
    and contribute a zero row; appearance alone drives their association.
    """
    scores = np.zeros((len(tracklets), len(detections)))
    for i, t in enumerate(tracklets):
        seq = t.history_sequence()
        if seq is None:
            continue
        predicted = binarize(predict(seq), threshold)
        for j, d in enumerate(detections):
            scores[i, j] = mask_iou(predicted, d.mask)
    return scores


def kalman_score(tracklets: Sequence[Tracklet], detections: Sequence[Detection],
                 sigma_d: float) -> np.ndarray:
    """exp(-distance/sigma) between predicted centers and detection centroids.

    The predicted center is read after the filter's per-frame predict step;
    tracklets without a filter (no centroid yet) contribute zeros.
    """
    scores = np.zeros((len(tracklets), len(detections)))
    centroids = [d.mask.centroid() for d in detections]
    for i, t in enumerate(tracklets):
        if t.kalman is None:
            continue
        center = t.kalman.center  # (cx, cy)
        for j, c in enumerate(centroids):
            if c is None:
                continue
            dist = float(np.hypot(center[0] - c[1], center[1] - c[0]))
            scores[i, j] = np.exp(-dist / sigma_d)
    return scores


def fuse_and_assign(appearance: np.ndarray, motion: np.ndarray | None = None,
                    weight: float = 1.0, top_k: int | None = None,
                    confidences: Sequence[float] | None = None,
                    match_threshold: float = 0.2):
    """Fuse score matrices and solve the assignment.

    fused = appearance + weight * motion, with motion rows zeroed outside
    the top_k most confident tracklets when top_k is set. The Hungarian
    solver maximizes total fused score; pairs below match_threshold are
    dropped to unmatched.

    Returns (matches, unmatched_tracklets, unmatched_detections) with
    matches as (tracklet_idx, detection_idx) pairs.
    """
    if weight < 0:
        raise ValueError(f"motion weight must be >= 0, got {weight}")
    fused = appearance.astype(np.float64).copy()
    if motion is not None:
        if motion.shape != appearance.shape:
            raise ValueError(f"shape mismatch: appearance {appearance.shape} vs motion {motion.shape}")
        motion_used = motion.astype(np.float64).copy()
        if top_k is not None:
            if confidences is None:
                raise ValueError("top_k filtering needs tracklet confidences")
            if len(confidences) > top_k:
                order = np.argsort(confidences)[::-1]
                motion_used[order[top_k:], :] = 0.0
        fused = fused + weight * motion_used

    n_t, n_d = fused.shape
    matches = []
    if n_t and n_d:
        rows, cols = linear_sum_assignment(-fused)
        for r, c in zip(rows, cols):
            if fused[r, c] >= match_threshold:
                matches.append((int(r), int(c)))
    matched_t = {r for r, _ in matches}
    matched_d = {c for _, c in matches}
    unmatched_t = [i for i in range(n_t) if i not in matched_t]
    unmatched_d = [j for j in range(n_d) if j not in matched_d]
    return matches, unmatched_t, unmatched_d


# --- scene-level harness ------------------------------------------------


@dataclass(frozen=True)
class TrackerConfig:
    scorer: str = "appearance"          # appearance | +motion | +kalman
    motion_weight: float = 1.0
    top_k: int | None = None
    match_threshold: float = 0.2
    persistence_budget: int = 10
    binarize_threshold: float = 0.5
    coast_with_prediction: bool = True  # extend history with forecasts while unmatched
    kalman_process_noise: float = 1e-2
    kalman_measurement_noise: float = 1.0
    embed_noise: float = 0.05
    detection_seed: int = 0

    def __post_init__(self):
        if self.scorer not in ("appearance", "+motion", "+kalman"):
            raise ValueError(f"scorer must be appearance, +motion or +kalman, got {self.scorer!r}")


def scene_detections(scene, rng: np.random.Generator, embed_noise: float = 0.05):
    """Ground-truth detections with color-based appearance embeddings.

    Per frame, each instance with a visible mask becomes one Detection whose
    embedding is the mean color over its pixels plus isotropic noise,
    normalized to the unit sphere. Returns per-frame lists of
    (gt_instance_id, Detection).
    """
    out = []
    for f_idx in range(len(scene.frame_indices)):
        frame_dets = []
        image = scene.images[f_idx]
        for seq in scene.masks:
            m = seq.frames[f_idx]
            if m.is_empty():
                continue
            color = image[m.bits.astype(bool)].mean(axis=0)
            emb = unit_embedding(color + rng.normal(0.0, embed_noise, size=3))
            frame_dets.append((seq.instance_id, Detection(m, emb)))
        out.append(frame_dets)
    return out


def track_scene(scene, cfg: TrackerConfig, predict: MotionModel | None = None):
    """Run the per-frame association loop over one scene.

    Returns per-frame lists of (track_id, gt_id, FrameMask) plus the scene's
    detection stream, for metric computation and result files.
    """
    if cfg.scorer == "+motion" and predict is None:
        raise ValueError("+motion scorer needs a motion model")
    h, w = scene.canvas
    sigma_d = float(np.hypot(h, w)) / 10.0
    rng = np.random.default_rng(cfg.detection_seed)
    detections_by_frame = scene_detections(scene, rng, cfg.embed_noise)

    kalman_noise = ((cfg.kalman_process_noise, cfg.kalman_measurement_noise)
                    if cfg.scorer == "+kalman" else None)
    tracklets: list[Tracklet] = []
    next_id = 0
    assignments = []
    matched_model_scores: list[float] = []
    for f_pos, frame_index in enumerate(scene.frame_indices):
        frame_dets = detections_by_frame[f_pos]
        dets = [d for _, d in frame_dets]
        live = [t for t in tracklets if t.missed <= cfg.persistence_budget]

        if cfg.scorer == "+kalman" and f_pos > 0:
            # advance every live filter once per frame; matched ones are
            # corrected below, unmatched ones keep coasting on the model
            for t in live:
                if t.kalman is not None:
                    t.kalman.predict()

        app = appearance_score(live, dets)
        extra = None
        if cfg.scorer == "+motion" and live and dets:
            extra = motion_score(predict, live, dets, cfg.binarize_threshold)
        elif cfg.scorer == "+kalman" and live and dets:
            extra = kalman_score(live, dets, sigma_d)
        matches, unmatched_t, unmatched_d = fuse_and_assign(
            app, extra, weight=cfg.motion_weight, top_k=cfg.top_k,
            confidences=[t.confidence for t in live],
            match_threshold=cfg.match_threshold)

        frame_assign = []
        for ti, dj in matches:
            if extra is not None:
                matched_model_scores.append(float(extra[ti, dj]))
            live[ti].update(frame_index, dets[dj])
            frame_assign.append((live[ti].track_id, frame_dets[dj][0], dets[dj].mask))
        for ti in unmatched_t:
            t = live[ti]
            predicted = None
            if cfg.scorer == "+motion" and cfg.coast_with_prediction:
                seq = t.history_sequence()
                if seq is not None:
                    predicted = binarize(predict(seq), cfg.binarize_threshold)
            t.coast(frame_index, predicted)
        for dj in unmatched_d:
            tracklets.append(Tracklet(next_id, frame_index, dets[dj], kalman_noise))
            frame_assign.append((next_id, frame_dets[dj][0], dets[dj].mask))
            next_id += 1
        assignments.append(frame_assign)
    aux = {"matched_model_scores": matched_model_scores}
    return assignments, aux


def compute_metrics(scene, assignments, iou_threshold: float = 0.5) -> dict:
    """IDSw / IDF1 / MOTSA / mean matched IoU against ground truth.

    Per frame, predictions match ground truth by Hungarian on IoU with the
    iou_threshold floor. IDSw counts frames where a ground-truth identity's
    matched track id differs from its last matched id. IDF1 uses the global
    trajectory-level Hungarian on per-pair matched-frame counts. MOTSA is the
    simplified (TP - FP - IDSw) / num_gt without ignore regions.
    """
    gt_ids = [seq.instance_id for seq in scene.masks]
    gt_total = 0
    pred_total = 0
    tp = 0
    fp = 0
    idsw = 0
    iou_sum = 0.0
    last_track: dict[str, int] = {}
    pair_hits: dict[tuple[str, int], int] = {}
    track_counts: dict[int, int] = {}

    for f_pos in range(len(scene.frame_indices)):
        gt_masks = [(gid, scene.masks[g].frames[f_pos])
                    for g, gid in enumerate(gt_ids)
                    if not scene.masks[g].frames[f_pos].is_empty()]
        preds = assignments[f_pos]
        gt_total += len(gt_masks)
        pred_total += len(preds)
        for track_id, _, _ in preds:
            track_counts[track_id] = track_counts.get(track_id, 0) + 1
        if gt_masks and preds:
            iou = np.zeros((len(gt_masks), len(preds)))
            for gi, (_, gm) in enumerate(gt_masks):
                for pj, (_, _, pm) in enumerate(preds):
                    iou[gi, pj] = mask_iou(gm, pm)
            rows, cols = linear_sum_assignment(-iou)
            matched_pred = set()
            for r, c in zip(rows, cols):
                if iou[r, c] < iou_threshold:
                    continue
                gid = gt_masks[r][0]
                track_id = preds[c][0]
                tp += 1
                iou_sum += iou[r, c]
                matched_pred.add(c)
                if gid in last_track and last_track[gid] != track_id:
                    idsw += 1
                last_track[gid] = track_id
                pair_hits[(gid, track_id)] = pair_hits.get((gid, track_id), 0) + 1
            fp += len(preds) - len(matched_pred)
        else:
            fp += len(preds)

    # IDF1: trajectory-level optimal identification
    idtp = 0
    if pair_hits:
        gt_list = sorted({g for g, _ in pair_hits})
        tr_list = sorted({t for _, t in pair_hits})
        hits = np.zeros((len(gt_list), len(tr_list)))
        for (g, t), n in pair_hits.items():
            hits[gt_list.index(g), tr_list.index(t)] = n
        rows, cols = linear_sum_assignment(-hits)
        idtp = int(hits[rows, cols].sum())
    idf1 = 2.0 * idtp / (gt_total + pred_total) if (gt_total + pred_total) else 1.0
    fn = gt_total - tp
    motsa = (tp - fp - idsw) / gt_total if gt_total else 1.0
    return {
        "IDSw": idsw,
        "IDF1": idf1,
        "MOTSA": motsa,
        "mean_iou": iou_sum / tp if tp else 0.0,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "gt_total": gt_total,
    }


def track_video(scene, cfg: TrackerConfig, predict: MotionModel | None = None) -> dict:
    """Track one scene and score it; returns metrics plus raw assignments."""
    if not scene.masks:
        raise ValueError("scene has no ground-truth instances")
    assignments, aux = track_scene(scene, cfg, predict)
    metrics = compute_metrics(scene, assignments)
    metrics["scene_id"] = scene.scene_id
    scores = aux["matched_model_scores"]
    metrics["model_score"] = float(np.mean(scores)) if scores else None
    return {"metrics": metrics, "assignments": assignments}


def track_dataset(dataset, cfg: TrackerConfig, predict: MotionModel | None = None,
                  split: str = "val", limit: int | None = None) -> dict:
    """Track every scene in a split and aggregate the metrics."""
    per_scene = []
    results = []
    indices = dataset.split_indices(split)
    if limit is not None:
        indices = indices[:limit]
    if not indices:
        raise ValueError(f"dataset split {split!r} has no scenes to track")
    for i in indices:
        scene = dataset.load_scene(i)
        out = track_video(scene, cfg, predict)
        per_scene.append(out["metrics"])
        results.append((scene, out["assignments"]))
    model_scores = [m["model_score"] for m in per_scene if m.get("model_score") is not None]
    totals = {
        "IDSw": sum(m["IDSw"] for m in per_scene),
        "IDF1": float(np.mean([m["IDF1"] for m in per_scene])),
        "MOTSA": float(np.mean([m["MOTSA"] for m in per_scene])),
        "mean_iou": float(np.mean([m["mean_iou"] for m in per_scene])),
        "model_score": float(np.mean(model_scores)) if model_scores else None,
        "per_scene": per_scene,
    }
    return {"metrics": totals, "results": results}


def write_track_file(path, scene, assignments) -> None:
    """One line per (frame_index, track_id, RLE mask) in the run-length grammar."""
    h, w = scene.canvas
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"TRACKS {h} {w}\n")
        for f_pos, frame_index in enumerate(scene.frame_indices):
            for track_id, _, mask in assignments[f_pos]:
                fh.write(f"{frame_index} {track_id} {encode_runs(mask.bits)}\n")


def write_metrics_json(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
