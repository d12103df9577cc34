"""Two-step training of the motion predictor.

Every iteration runs both steps in order. Step 1 unfreezes the memory and
optimizes the posterior encoder, mask encoder, recurrent stack, fusion,
decoder, memory rows, and (in 'trained' mode) the image encoder, predicting
from the full-sequence latent. Step 2 freezes the memory and optimizes the
prior encoder alone, predicting from the history-only latent. At inference
only the step-2 path exists.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from maskmotion.losses import LossWeights, dice_loss, focal_loss, mask_loss
from maskmotion.masks import binarize, mask_iou, resize_image_with_padding, resize_with_padding
from maskmotion.model import DTYPE, MotionPredictor, NetConfig, save_checkpoint
from maskmotion.synth import SceneDataset


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 8
    iterations: int = 2000
    n_range: tuple[int, int] = (2, 5)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_range
        if lo < 2 or hi < lo:
            raise ValueError(f"n_range must be within [2, inf) and ordered, got {self.n_range}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class LossReport:
    step1_loss: float
    step2_loss: float
    dice: float   # dice component of the step-2 (inference-path) prediction
    focal: float


class WindowSampler:
    """Uniform sampler over (scene, instance, end-frame, n) training windows.

    Masks and images are resized to the network side up front; batches are
    assembled on demand with one shared n per iteration so histories stack.
    """

    def __init__(self, dataset: SceneDataset, split: str, input_side: int,
                 with_images: bool, seed: int, max_n: int):
        self.input_side = input_side
        self.with_images = with_images
        self.rng = np.random.default_rng(seed)
        self.masks: list[np.ndarray] = []     # (T, S, S) float64 per instance
        self.images: list[np.ndarray] = []    # (T, 3, S, S) float64 per instance's scene
        self.lengths: list[int] = []
        image_cache: dict[str, np.ndarray] = {}
        for scene in dataset.iter_split(split):
            if self.with_images and scene.scene_id not in image_cache:
                imgs = np.stack([
                    resize_image_with_padding(scene.images[t], input_side).transpose(2, 0, 1)
                    for t in range(scene.images.shape[0])
                ])
                image_cache[scene.scene_id] = imgs
            for seq in scene.masks:
                if len(seq) < max_n + 1:
                    continue
                stack = np.stack([
                    resize_with_padding(f, input_side)[0].bits.astype(np.float64)
                    for f in seq.frames
                ])
                self.masks.append(stack)
                self.lengths.append(len(seq))
                if self.with_images:
                    self.images.append(image_cache[scene.scene_id])
        if not self.masks:
            raise ValueError(f"dataset split {split!r} holds no window of length >= {max_n + 1}")

    def sample_batch(self, batch_size: int, n: int):
        hist = np.empty((batch_size, n, self.input_side, self.input_side))
        target = np.empty((batch_size, self.input_side, self.input_side))
        images = np.empty((batch_size, 3, self.input_side, self.input_side)) if self.with_images else None
        for b in range(batch_size):
            k = int(self.rng.integers(len(self.masks)))
            t_end = int(self.rng.integers(n, self.lengths[k]))
            hist[b] = self.masks[k][t_end - n:t_end]
            target[b] = self.masks[k][t_end]
            if self.with_images:
                images[b] = self.images[k][t_end]
        return (
            torch.from_numpy(hist).to(DTYPE),
            torch.from_numpy(target).to(DTYPE),
            torch.from_numpy(images).to(DTYPE) if images is not None else None,
        )


def iter_eval_windows(dataset: SceneDataset, split: str, max_history: int = 5):
    """Yield (scene, history MaskSequence, target FrameMask, target position)
    for every next-frame prediction a split supports."""
    for scene in dataset.iter_split(split):
        for seq in scene.masks:
            for pos in range(2, len(seq)):
                start = max(0, pos - max_history)
                yield scene, seq.window(start, pos), seq.frames[pos], pos


def evaluate_next_frame_iou(dataset: SceneDataset, split, predict_fn,
                            max_history: int = 5, threshold: float = 0.5) -> dict:
    """Mean IoU of binarized next-frame predictions over a held-out split.

    predict_fn maps a history MaskSequence (canvas geometry) to a ProbMask
    in the same geometry. Empty-vs-empty agreements score 1 by the IoU
    convention, which is the correct reward for predicting absence.
    """
    ious = []
    for _, history, target, _ in iter_eval_windows(dataset, split, max_history):
        pred = binarize(predict_fn(history), threshold)
        ious.append(mask_iou(pred, target))
    if not ious:
        raise ValueError(f"split {split!r} has no evaluable windows")
    return {"mean_iou": float(np.mean(ious)), "count": len(ious)}


def make_optimizers(net: MotionPredictor, cfg: TrainConfig):
    groups = net.parameter_groups()
    opt1 = torch.optim.Adam(groups["step1"], lr=cfg.learning_rate)
    opt2 = torch.optim.Adam(groups["step2"], lr=cfg.learning_rate)
    return opt1, opt2


def train_iteration(net: MotionPredictor, opt1, opt2, batch,
                    weights: LossWeights = LossWeights(),
                    verify_isolation: bool = False) -> LossReport:
    """One full iteration: step 1 then step 2 on the same batch.

    With verify_isolation, a bitwise snapshot taken between the steps
    confirms that step 2 altered nothing outside the prior encoder.
    """
    history, target, images = batch
    if history.shape[0] == 0:
        raise ValueError("empty batch")

    net.bank.set_frozen(False)
    opt1.zero_grad(set_to_none=True)
    pred1 = net(history, target=target, image=images, mode="train_step1")
    loss1 = mask_loss(pred1[:, 0], target, weights)
    if not torch.isfinite(loss1):
        raise RuntimeError(f"step-1 loss is not finite: {loss1.item()}")
    loss1.backward()
    opt1.step()
    net.bank.enforce_nonzero_rows()

    before = _snapshot_non_prior(net) if verify_isolation else None

    net.bank.set_frozen(True)
    opt2.zero_grad(set_to_none=True)
    pred2 = net(history, image=images, mode="train_step2")
    d = dice_loss(pred2[:, 0], target)
    f = focal_loss(pred2[:, 0], target, weights.focal_gamma, weights.focal_alpha)
    loss2 = weights.lambda_focal * f + weights.lambda_dice * d
    if not torch.isfinite(loss2):
        raise RuntimeError(f"step-2 loss is not finite: {loss2.item()}")
    loss2.backward()
    opt2.step()

    if before is not None:
        for name, tensor in _snapshot_non_prior(net).items():
            if not torch.equal(tensor, before[name]):
                raise RuntimeError(
                    f"step 2 modified {name}, which is outside the prior encoder")

    return LossReport(loss1.item(), loss2.item(), d.item(), f.item())


def _snapshot_non_prior(net: MotionPredictor) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in net.named_parameters()
            if not n.startswith("prior_enc.")}


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def run_training(dataset: SceneDataset, net_config: NetConfig, cfg: TrainConfig,
                 out_dir, weights: LossWeights = LossWeights(),
                 isolation_check: bool = False, split: str = "train",
                 log_every: int = 0) -> dict:
    """Train from scratch on a dataset split; deterministic under cfg.seed.

    Writes checkpoint.ckpt and loss_curve.csv (header
    iteration,step1_loss,step2_loss,dice,focal; one row per iteration) into
    out_dir. With isolation_check, every iteration verifies bitwise that
    step 2 touched nothing outside the prior encoder.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        net = MotionPredictor(net_config)
        sampler = WindowSampler(
            dataset, split, net_config.input_side,
            with_images=net_config.use_image_refine,
            seed=cfg.seed + 1, max_n=cfg.n_range[1],
        )
        opt1, opt2 = make_optimizers(net, cfg)
        n_rng = np.random.default_rng(cfg.seed + 2)
        rows = []
        isolation_verified = 0
        for it in range(cfg.iterations):
            n = int(n_rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
            batch = sampler.sample_batch(cfg.batch_size, n)
            try:
                report = train_iteration(net, opt1, opt2, batch, weights,
                                         verify_isolation=isolation_check)
            except RuntimeError as exc:
                raise RuntimeError(f"iteration {it}: {exc}") from exc
            if isolation_check:
                isolation_verified += 1
            rows.append((it, report.step1_loss, report.step2_loss, report.dice, report.focal))
            if log_every and (it + 1) % log_every == 0:
                print(f"iter {it + 1}/{cfg.iterations} "
                      f"step1 {report.step1_loss:.4f} step2 {report.step2_loss:.4f}")
        ckpt_path = out / "checkpoint.ckpt"
        save_checkpoint(net, ckpt_path)
        csv_path = out / "loss_curve.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "step1_loss", "step2_loss", "dice", "focal"])
            writer.writerows(rows)
        return {
            "checkpoint": ckpt_path,
            "loss_curve": csv_path,
            "final_step1_loss": rows[-1][1],
            "final_step2_loss": rows[-1][2],
            "isolation_verified_iterations": isolation_verified,
            "net": net,
        }
    finally:
        torch.use_deterministic_algorithms(was_deterministic)
