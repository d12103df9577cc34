import csv

import numpy as np
import pytest
import torch

from maskmotion.model import MotionPredictor, NetConfig
from maskmotion.synth import load_dataset, make_benchmark_suite
from maskmotion.train import (
    LossReport,
    TrainConfig,
    WindowSampler,
    make_optimizers,
    run_training,
    seed_everything,
    train_iteration,
)

TINY_NET = NetConfig(input_side=32, latent_l=12, memory_c=6, encoder_channels=(4, 6, 8), lstm_layers=1)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "suite"
    make_benchmark_suite("translation", 6, 99, root, canvas=(32, 32), num_frames=10)
    return load_dataset(root)


def make_batch(net, sampler, n=3, b=2):
    return sampler.sample_batch(b, n)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 5e-5
        assert cfg.n_range == (2, 5)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(n_range=(1, 5))
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTrainIteration:
    def test_step2_touches_only_prior_encoder(self, tiny_dataset):
        seed_everything(0)
        net = MotionPredictor(TINY_NET)
        sampler = WindowSampler(tiny_dataset, "train", 32, False, seed=1, max_n=5)
        opt1, opt2 = make_optimizers(net, TrainConfig(learning_rate=1e-3))
        for _ in range(3):
            report = train_iteration(net, opt1, opt2, make_batch(net, sampler),
                                     verify_isolation=True)
            assert isinstance(report, LossReport)

    def test_prior_encoder_moves_in_step2(self, tiny_dataset):
        seed_everything(1)
        net = MotionPredictor(TINY_NET)
        sampler = WindowSampler(tiny_dataset, "train", 32, False, seed=2, max_n=5)
        opt1, opt2 = make_optimizers(net, TrainConfig(learning_rate=1e-3))
        before = {n: p.detach().clone() for n, p in net.named_parameters()
                  if n.startswith("prior_enc.")}
        train_iteration(net, opt1, opt2, make_batch(net, sampler))
        changed = any(not torch.equal(p.detach(), before[n])
                      for n, p in net.named_parameters() if n.startswith("prior_enc."))
        assert changed

    def test_empty_batch_rejected(self):
        seed_everything(2)
        net = MotionPredictor(TINY_NET)
        opt1, opt2 = make_optimizers(net, TrainConfig())
        empty = (torch.zeros(0, 3, 32, 32), torch.zeros(0, 32, 32), None)
        with pytest.raises(ValueError, match="empty"):
            train_iteration(net, opt1, opt2, empty)


class TestRunTraining:
    def test_loss_csv_has_one_row_per_iteration(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(iterations=4, batch_size=2, seed=5)
        result = run_training(tiny_dataset, TINY_NET, cfg, tmp_path / "run")
        with open(result["loss_curve"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "step1_loss", "step2_loss", "dice", "focal"]
        assert len(rows) == 1 + 4

    def test_same_seed_same_checkpoint_bitwise(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(iterations=3, batch_size=2, seed=7)
        r1 = run_training(tiny_dataset, TINY_NET, cfg, tmp_path / "a")
        r2 = run_training(tiny_dataset, TINY_NET, cfg, tmp_path / "b")
        assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == \
               (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
        assert r1["final_step2_loss"] == r2["final_step2_loss"]

    def test_different_seed_differs(self, tiny_dataset, tmp_path):
        r1 = run_training(tiny_dataset, TINY_NET, TrainConfig(iterations=2, batch_size=2, seed=1),
                          tmp_path / "a")
        r2 = run_training(tiny_dataset, TINY_NET, TrainConfig(iterations=2, batch_size=2, seed=2),
                          tmp_path / "b")
        assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() != \
               (tmp_path / "b" / "checkpoint.ckpt").read_bytes()

    def test_isolation_check_counts(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(iterations=2, batch_size=2, seed=9)
        result = run_training(tiny_dataset, TINY_NET, cfg, tmp_path / "run",
                              isolation_check=True)
        assert result["isolation_verified_iterations"] == 2


class TestWindowSampler:
    def test_variable_n(self, tiny_dataset):
        sampler = WindowSampler(tiny_dataset, "train", 32, False, seed=3, max_n=5)
        for n in (2, 5):
            hist, target, images = sampler.sample_batch(3, n)
            assert hist.shape == (3, n, 32, 32)
            assert target.shape == (3, 32, 32)
            assert images is None

    def test_images_resized_when_requested(self, tiny_dataset):
        sampler = WindowSampler(tiny_dataset, "train", 32, True, seed=4, max_n=5)
        _, _, images = sampler.sample_batch(2, 2)
        assert images.shape == (2, 3, 32, 32)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_empty_split_rejected(self, tmp_path):
        make_benchmark_suite("translation", 2, 5, tmp_path / "d", canvas=(32, 32), num_frames=4)
        ds = load_dataset(tmp_path / "d")
        with pytest.raises(ValueError, match="window"):
            WindowSampler(ds, "train", 32, False, seed=0, max_n=5)
