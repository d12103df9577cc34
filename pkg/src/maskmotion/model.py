"""The mask-sequence prediction network.

Two pattern encoders share one architecture with disjoint parameters: the
posterior encoder sees the history plus the target frame (training step 1
only), the prior encoder sees history alone and is the sole pattern source
at inference. A mask encoder + stacked convolutional LSTM produces a spatial
feature from the history; the memory-refined latent is broadcast over that
grid, concatenated on channels, mixed by a 1x1 convolution, and decoded back
to full resolution. Optional low-level image features (strides 4 and 8)
refine the boundary just before decoding.

The whole network runs in float64: desk-scale models are tiny and the
acceptance tolerances (1e-9 addressing agreement, finite-difference gradient
checks) leave no room for float32 rounding.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from maskmotion.masks import (
    MaskSequence,
    ProbMask,
    resize_with_padding,
    undo_resize_array,
)
from maskmotion.memory import MemoryBank

CHECKPOINT_VERSION = 1
DTYPE = torch.float64

IMAGE_ENCODER_MODES = ("trained", "fixed", "none")


class IncompatibleCheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_side: int = 384
    latent_l: int = 256
    memory_c: int = 100
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    lstm_layers: int = 3
    use_image_refine: bool = False
    image_encoder_mode: str = "none"

    def __post_init__(self):
        if self.lstm_layers < 1:
            raise ValueError(f"lstm_layers must be >= 1, got {self.lstm_layers}")
        if self.input_side < 8 or self.input_side % 4 != 0:
            raise ValueError(f"input_side must be a multiple of 4 and >= 8, got {self.input_side}")
        if self.image_encoder_mode not in IMAGE_ENCODER_MODES:
            raise ValueError(f"image_encoder_mode must be one of {IMAGE_ENCODER_MODES}")
        if self.use_image_refine and self.image_encoder_mode == "none":
            raise ValueError("use_image_refine requires image_encoder_mode 'trained' or 'fixed'")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder_channels needs exactly 3 stage widths")


def desk_config(**overrides) -> NetConfig:
    """Small-canvas defaults used by the synthetic benchmark.

    Memory geometry keeps the published sizes (l=256, c=100); the conv
    widths shrink to keep a 2-core CPU run in the minutes range.
    """
    base = dict(input_side=64, latent_l=256, memory_c=100, encoder_channels=(16, 32, 64))
    base.update(overrides)
    return NetConfig(**base)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden_ch: int, kernel: int = 3):
        super().__init__()
        self.hidden_ch = hidden_ch
        self.gates = nn.Conv2d(in_ch + hidden_ch, 4 * hidden_ch, kernel, padding=kernel // 2)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvLSTM(nn.Module):
    """Stacked convolutional LSTM; returns the top layer's final hidden state."""

    def __init__(self, in_ch: int, hidden_ch: int, num_layers: int):
        super().__init__()
        self.cells = nn.ModuleList(
            ConvLSTMCell(in_ch if i == 0 else hidden_ch, hidden_ch) for i in range(num_layers))

    def forward(self, x):  # x: (B, T, C, H, W)
        b, t, _, hh, ww = x.shape
        states = [
            (x.new_zeros(b, cell.hidden_ch, hh, ww), x.new_zeros(b, cell.hidden_ch, hh, ww))
            for cell in self.cells
        ]
        for step in range(t):
            inp = x[:, step]
            for i, cell in enumerate(self.cells):
                states[i] = cell(inp, states[i])
                inp = states[i][0]
        return states[-1][0]


class PatternEncoder(nn.Module):
    """Mask-sequence to motion latent: three 3-D convolutions, pooled and projected.

    Convolutions stride only spatially, so any history length >= 2 is
    accepted; global average pooling absorbs the variable time axis.
    """

    def __init__(self, channels: tuple[int, int, int], latent_l: int):
        super().__init__()
        c1, c2, c3 = channels
        self.conv = nn.Sequential(
            nn.Conv3d(1, c1, 3, stride=(1, 2, 2), padding=1), nn.ReLU(),
            nn.Conv3d(c1, c2, 3, stride=(1, 2, 2), padding=1), nn.ReLU(),
            nn.Conv3d(c2, c3, 3, stride=(1, 2, 2), padding=1), nn.ReLU(),
        )
        self.proj = nn.Linear(c3, latent_l)

    def forward(self, masks):  # (B, T, H, W) -> (B, l)
        x = masks.unsqueeze(1)  # (B, 1, T, H, W)
        x = self.conv(x)
        return self.proj(x.mean(dim=(2, 3, 4)))


class MaskEncoder(nn.Module):
    """Per-frame mask features at stride 4 (two stride-2 convolutions)."""

    def __init__(self, channels: tuple[int, int, int]):
        super().__init__()
        c1, c2, _ = channels
        self.conv = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.out_channels = c2

    def forward(self, masks):  # (B, T, H, W) -> (B, T, C, H/4, W/4)
        b, t, h, w = masks.shape
        feats = self.conv(masks.reshape(b * t, 1, h, w))
        return feats.reshape(b, t, self.out_channels, h // 4, w // 4)


class ImageEncoder(nn.Module):
    """Low-level image features at strides 4 and 8 (desk-scale stand-in for
    the first two stages of a pretrained backbone)."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU())
        self.stage4 = nn.Sequential(nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU())
        self.stage8 = nn.Sequential(nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU())
        self.out_channels = width

    def forward(self, image):  # (B, 3, H, W) -> stride-4, stride-8 features
        x = self.stem(image)
        f4 = self.stage4(x)
        f8 = self.stage8(f4)
        return f4, f8


class Decoder(nn.Module):
    """Three transposed convolutions from stride 4 back to full resolution."""

    def __init__(self, in_ch: int, channels: tuple[int, int, int]):
        super().__init__()
        c1, c2, _ = channels
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(in_ch, c2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c1, 1, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.deconv(x))


class MotionPredictor(nn.Module):
    """Full predictor; owns the memory bank and both pattern encoders."""

    def __init__(self, config: NetConfig, bank: MemoryBank | None = None):
        super().__init__()
        self.config = config
        if bank is None:
            bank = MemoryBank(config.memory_c, config.latent_l, dtype=DTYPE)
        if bank.length_l != config.latent_l or bank.size_c != config.memory_c:
            raise ValueError(
                f"bank {bank.size_c}x{bank.length_l} does not match config "
                f"c={config.memory_c}, l={config.latent_l}")
        self.bank = bank
        self.posterior_enc = PatternEncoder(config.encoder_channels, config.latent_l)
        self.prior_enc = PatternEncoder(config.encoder_channels, config.latent_l)
        self.mask_enc = MaskEncoder(config.encoder_channels)
        feat_ch = self.mask_enc.out_channels
        self.lstm = ConvLSTM(feat_ch, feat_ch, config.lstm_layers)
        self.fuse = nn.Conv2d(feat_ch + config.latent_l, feat_ch, 1)
        self.decoder = Decoder(feat_ch, config.encoder_channels)
        if config.image_encoder_mode != "none":
            self.image_enc = ImageEncoder()
            self.refine_proj = nn.Conv2d(self.image_enc.out_channels, feat_ch, 1)
            if config.image_encoder_mode == "fixed":
                for p in self.image_enc.parameters():
                    p.requires_grad_(False)
        else:
            self.image_enc = None
            self.refine_proj = None
        self.to(DTYPE)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameter sets for the two-step trainer.

        step1: everything except the prior encoder (bank included; image
        encoder included only when mode is 'trained'). step2: the prior
        encoder alone.
        """
        step1, step2 = [], []
        for name, p in self.named_parameters():
            if name.startswith("prior_enc."):
                step2.append(p)
            elif name.startswith("image_enc.") and self.config.image_encoder_mode != "trained":
                continue
            else:
                step1.append(p)
        return {"step1": step1, "step2": step2}

    def encode_pattern_posterior(self, masks):  # (B, T>=3, H, W)
        if masks.shape[1] < 3:
            raise ValueError(f"posterior encoder needs history plus target (>= 3 frames), got {masks.shape[1]}")
        return self.posterior_enc(masks)

    def encode_pattern_prior(self, masks):  # (B, T>=2, H, W)
        if masks.shape[1] < 2:
            raise ValueError(f"prior encoder needs a history of >= 2 frames, got {masks.shape[1]}")
        return self.prior_enc(masks)

    def _mask_feature(self, history):
        return self.lstm(self.mask_enc(history))

    def _refine(self, fused, image):
        f4, f8 = self.image_enc(image)
        up8 = nn.functional.interpolate(f8, scale_factor=2, mode="nearest")
        return fused + self.refine_proj(up8 + f4)

    def forward(self, history: torch.Tensor, target: torch.Tensor | None = None,
                image: torch.Tensor | None = None, mode: str = "infer") -> torch.Tensor:
        """Predict the next-frame probability mask.

        history: (B, n, H, W) with n >= 2; target: (B, H, W), consumed only
        in train_step1 (the posterior path); image: (B, 3, H, W), consumed
        only when the image-refinement path is enabled.
        """
        if mode not in ("train_step1", "train_step2", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        side = self.config.input_side
        if history.dim() != 4 or history.shape[-2:] != (side, side):
            raise ValueError(
                f"history must be (B, n, {side}, {side}); got {tuple(history.shape)} "
                "(resize inputs first)")
        if self.config.use_image_refine:
            if image is None:
                raise ValueError("image refinement is enabled but no image was given")
        if mode == "train_step1":
            if target is None:
                raise ValueError("train_step1 needs the target frame for the posterior encoder")
            z = self.encode_pattern_posterior(torch.cat([history, target.unsqueeze(1)], dim=1))
        else:
            z = self.encode_pattern_prior(history)
        z_hat = self.bank.lookup(z)

        if mode == "train_step2":
            # only the prior encoder trains in step 2; the mask-feature
            # branch contributes no trainable gradient there
            with torch.no_grad():
                f = self._mask_feature(history)
        else:
            f = self._mask_feature(history)

        b, _, fh, fw = f.shape
        z_map = z_hat.unsqueeze(-1).unsqueeze(-1).expand(b, self.config.latent_l, fh, fw)
        fused = self.fuse(torch.cat([f, z_map], dim=1))
        if self.config.use_image_refine and image is not None:
            fused = self._refine(fused, image)
        return self.decoder(fused)


def _sequence_to_tensor(masks: MaskSequence) -> torch.Tensor:
    arr = np.stack([f.bits for f in masks.frames]).astype(np.float64)
    return torch.from_numpy(arr).unsqueeze(0)


def predict_mask(net: MotionPredictor, masks: MaskSequence,
                 image: np.ndarray | None = None, mode: str = "infer") -> ProbMask:
    """Predict the next-frame mask probabilities for one instance.

    In infer / train_step2 modes the sequence is the history alone; in
    train_step1 its last frame is treated as the target. The inference
    interface never sees a target frame.
    """
    side = net.config.input_side
    if masks.height != side or masks.width != side:
        raise ValueError(
            f"sequence is {masks.height}x{masks.width}, expected {side}x{side}; resize first")
    seq = _sequence_to_tensor(masks)
    img_t = None
    if image is not None:
        if image.ndim != 3 or image.shape != (side, side, 3):
            raise ValueError(f"image must be {side}x{side}x3, got {image.shape}")
        img_t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))
        img_t = img_t.permute(2, 0, 1).unsqueeze(0)
    if mode == "train_step1":
        history, target = seq[:, :-1], seq[:, -1]
        if history.shape[1] < 2:
            raise ValueError("train_step1 needs >= 2 history frames plus the target")
        out = net(history, target=target, image=img_t, mode=mode)
    else:
        with torch.no_grad():
            out = net(seq, image=img_t, mode=mode)
    return ProbMask(out[0, 0].detach().numpy())


def copy_last_mask(masks: MaskSequence) -> ProbMask:
    """Trivial baseline: propagate the most recent mask unchanged."""
    return ProbMask(masks.frames[-1].bits.astype(np.float64))


def make_motion_model(net: MotionPredictor):
    """Adapt a net to canvas geometry: mask history in, probability mask out.

    Sequences already at the network side pass straight through; anything
    else is resized in and the prediction mapped back by the recorded
    inverse transform.
    """
    side = net.config.input_side

    def predict_fn(seq: MaskSequence) -> ProbMask:
        if (seq.height, seq.width) == (side, side):
            return predict_mask(net, seq, mode="infer")
        resized = [resize_with_padding(f, side) for f in seq.frames]
        tf = resized[0][1]
        net_seq = MaskSequence(seq.instance_id, tuple(m for m, _ in resized),
                               seq.frame_indices)
        prob = predict_mask(net, net_seq, mode="infer")
        return ProbMask(np.clip(undo_resize_array(prob.probs, tf), 0.0, 1.0))

    return predict_fn


def save_checkpoint(net: MotionPredictor, path) -> None:
    """Self-describing checkpoint: config, every parameter, bank freeze state."""
    state = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "state": state,
        "bank_frozen": net.bank.frozen,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path, expect_config: NetConfig | None = None) -> MotionPredictor:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    cfg_dict = dict(payload["config"])
    cfg_dict["encoder_channels"] = tuple(cfg_dict["encoder_channels"])
    config = NetConfig(**cfg_dict)
    if expect_config is not None and config != expect_config:
        raise IncompatibleCheckpointError(
            f"checkpoint config {config} does not match expected {expect_config}")
    net = MotionPredictor(config)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in payload["state"].items()})
    net.bank.set_frozen(bool(payload["bank_frozen"]))
    return net
