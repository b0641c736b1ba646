"""Multi-task multiple-instance network.

A residual patch encoder phi maps each d x d x 3 patch to a length-M
embedding; additive attention pools the bag into a single vector z; an
affine classifier rho turns z into the referable-DR probability; and a
U-Net style decoder theta reconstructs per-patch lesion probability maps
from the embedding plus the encoder's skip features.

The functional operations (encode_patch, attend, classify, decode_patch,
forward_bag) run in inference mode on numpy arrays, one patch at a time, so
per-patch outputs never depend on the rest of the bag. Training uses the
batched tensor methods on MilNet directly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .patches import PatchBag

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file missing, corrupt, or from an unknown format version."""


@dataclass(frozen=True)
class MilNetConfig:
    d: int = 64
    M: int = 128
    L: int = 32
    lesion_channels: int = 3
    encoder_widths: tuple[int, int, int, int] = (64, 128, 256, 512)

    def __post_init__(self):
        if self.d % 16 != 0 or self.d < 16:
            raise ValueError("patch side must be a positive multiple of 16")
        if self.M < 1 or self.L < 1:
            raise ValueError("M and L must be at least 1")
        if self.lesion_channels < 1:
            raise ValueError("need at least one lesion channel")
        if len(self.encoder_widths) != 4 or any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder_widths must be four positive stage widths")
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))


@dataclass(frozen=True)
class PatchEncoding:
    h: np.ndarray  # (M,)
    skips: tuple[np.ndarray, ...]  # stage outputs at d/2, d/4, d/8, d/16


@dataclass(frozen=True)
class BagForwardResult:
    alphas: np.ndarray  # (K,) attention weights, a simplex vector
    z: np.ndarray  # (M,) pooled bag embedding
    rdr_prob: float
    lesion_maps: np.ndarray  # (K, d, d, 3) in [0, 1]
    origins: np.ndarray  # (K, 2)

    def __post_init__(self):
        if abs(float(self.alphas.sum()) - 1.0) > 1e-6 or (self.alphas < 0).any():
            raise ValueError("attention weights must form a simplex")
        if not 0.0 < self.rdr_prob < 1.0:
            raise ValueError("rdr_prob must lie strictly inside (0, 1)")


class BasicBlock(nn.Module):
    """Two 3x3 convs with a residual shortcut (projected when shapes change)."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.relu(y + self.shortcut(x))


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MilNet(nn.Module):
    def __init__(self, config: MilNetConfig):
        super().__init__()
        self.config = config
        w = config.encoder_widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(w[0]),
            nn.ReLU(inplace=True),
        )
        prev = w[0]
        stages = []
        for width in w:
            stages.append(
                nn.Sequential(BasicBlock(prev, width, 2), BasicBlock(width, width, 1))
            )
            prev = width
        self.stages = nn.ModuleList(stages)
        self.proj = nn.Linear(w[3], config.M)

        self.att_v = nn.Linear(config.M, config.L, bias=False)
        self.att_w = nn.Linear(config.L, 1, bias=False)
        self.classifier = nn.Linear(config.M, 1)

        s = config.d // 16
        self.bottleneck_side = s
        self.seed = nn.Linear(config.M, w[3] * s * s)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec4 = _conv_block(w[3] + w[3], w[2])  # at d/16, with stage-4 skip
        self.dec3 = _conv_block(w[2] + w[2], w[1])  # at d/8, with stage-3 skip
        self.dec2 = _conv_block(w[1] + w[1], w[0])  # at d/4, with stage-2 skip
        self.dec1 = _conv_block(w[0] + w[0], w[0])  # at d/2, with stage-1 skip
        self.dec0 = _conv_block(w[0], w[0])  # at full patch resolution
        self.head = nn.Conv2d(w[0], config.lesion_channels, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        # a silent segmentation head at the start of training
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.zeros_(self.classifier.bias)

    # --- batched tensor paths (training) ---

    def encode(self, x: torch.Tensor):
        """x: (B, 3, d, d) raw intensities in [0, 255]."""
        y = self.stem(x / 127.5 - 1.0)
        skips = []
        for stage in self.stages:
            y = stage(y)
            skips.append(y)
        h = self.proj(y.mean(dim=(2, 3)))
        return h, skips

    def attend_tensors(self, H: torch.Tensor):
        """H: (K, M). Softmax over the bag with max subtraction."""
        logits = self.att_w(torch.tanh(self.att_v(H))).squeeze(-1)
        e = torch.exp(logits - logits.max())
        alphas = e / e.sum()
        z = alphas @ H
        return alphas, z

    def classify_logit(self, z: torch.Tensor) -> torch.Tensor:
        return self.classifier(z).squeeze(-1)

    def decode(self, h: torch.Tensor, skips) -> torch.Tensor:
        """h: (B, M) with matching skips; returns (B, channels, d, d) in [0, 1]."""
        s = self.bottleneck_side
        y = self.seed(h).view(h.shape[0], self.config.encoder_widths[3], s, s)
        y = self.dec4(torch.cat([y, skips[3]], dim=1))
        y = self.dec3(torch.cat([self.up(y), skips[2]], dim=1))
        y = self.dec2(torch.cat([self.up(y), skips[1]], dim=1))
        y = self.dec1(torch.cat([self.up(y), skips[0]], dim=1))
        y = self.dec0(self.up(y))
        return torch.sigmoid(self.head(y))


def _param_dtype(net: MilNet) -> torch.dtype:
    return next(net.parameters()).dtype


def _check_patch_shape(net: MilNet, patch_pixels: np.ndarray):
    d = net.config.d
    if patch_pixels.shape != (d, d, 3):
        raise ValueError(f"expected ({d}, {d}, 3) patch, got {patch_pixels.shape}")


def encode_patch(net: MilNet, patch_pixels: np.ndarray) -> PatchEncoding:
    """Inference-mode embedding of one patch; skips retained for the decoder."""
    _check_patch_shape(net, patch_pixels)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(patch_pixels)).to(_param_dtype(net))
            h, skips = net.encode(x.permute(2, 0, 1).unsqueeze(0))
    finally:
        net.train(was_training)
    return PatchEncoding(
        h=h[0].numpy(), skips=tuple(s[0].numpy() for s in skips)
    )


def attend(net: MilNet, H: np.ndarray):
    """Additive attention over bag embeddings H (K, M) -> (alphas, z)."""
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[1] != net.config.M:
        raise ValueError(f"expected (K, {net.config.M}) embeddings, got {H.shape}")
    if H.shape[0] < 1:
        raise ValueError("bag must hold at least one embedding")
    if not np.isfinite(H).all():
        raise ValueError("non-finite embeddings")
    with torch.no_grad():
        alphas, z = net.attend_tensors(torch.from_numpy(H).to(_param_dtype(net)))
    return alphas.numpy(), z.numpy()


def classify(net: MilNet, z: np.ndarray) -> float:
    """Referable-DR probability from the pooled embedding."""
    z = np.asarray(z)
    if z.shape != (net.config.M,):
        raise ValueError(f"expected ({net.config.M},) embedding, got {z.shape}")
    with torch.no_grad():
        logit = float(net.classify_logit(torch.from_numpy(z).to(_param_dtype(net))))
    prob = 1.0 / (1.0 + np.exp(-np.float64(logit)))
    return float(np.clip(prob, 1e-12, 1.0 - 1e-12))


def decode_patch(net: MilNet, enc: PatchEncoding) -> np.ndarray:
    """Per-patch lesion probability map, (d, d, channels) in [0, 1]."""
    d = net.config.d
    expect = [
        (net.config.encoder_widths[i], d >> (i + 1), d >> (i + 1)) for i in range(4)
    ]
    got = [tuple(s.shape) for s in enc.skips]
    if got != expect:
        raise ValueError(f"skip shapes {got} do not match config {expect}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            dtype = _param_dtype(net)
            h = torch.from_numpy(np.ascontiguousarray(enc.h)).to(dtype).unsqueeze(0)
            skips = [
                torch.from_numpy(np.ascontiguousarray(s)).to(dtype).unsqueeze(0)
                for s in enc.skips
            ]
            maps = net.decode(h, skips)
    finally:
        net.train(was_training)
    return maps[0].permute(1, 2, 0).numpy()


def forward_bag(net: MilNet, bag: PatchBag) -> BagForwardResult:
    """Full inference pipeline over a bag, patch by patch."""
    encodings = [encode_patch(net, p.pixels) for p in bag.patches]
    H = np.stack([e.h for e in encodings])
    alphas, z = attend(net, H)
    rdr_prob = classify(net, z)
    lesion_maps = np.stack([decode_patch(net, e) for e in encodings])
    return BagForwardResult(
        alphas=alphas,
        z=z,
        rdr_prob=rdr_prob,
        lesion_maps=lesion_maps,
        origins=bag.origins_array(),
    )


def forward_bag_batched(net: MilNet, bag: PatchBag, chunk: int = 64) -> BagForwardResult:
    """forward_bag computed in chunked tensor batches.

    Same math as the patch-by-patch path (eval-mode BatchNorm uses running
    stats, so batching cannot change any per-patch value beyond float
    reassociation); chunking keeps the decoder's skip tensors bounded.
    """
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            dtype = _param_dtype(net)
            pixels = torch.from_numpy(np.ascontiguousarray(bag.pixels_array()))
            pixels = pixels.to(dtype).permute(0, 3, 1, 2)
            hs, maps = [], []
            for start in range(0, pixels.shape[0], chunk):
                h, skips = net.encode(pixels[start : start + chunk])
                maps.append(net.decode(h, skips))
                hs.append(h)
            h_all = torch.cat(hs)
            alphas, z = net.attend_tensors(h_all)
            logit = float(net.classify_logit(z))
    finally:
        net.train(was_training)
    prob = 1.0 / (1.0 + np.exp(-np.float64(logit)))
    return BagForwardResult(
        alphas=alphas.numpy(),
        z=z.numpy(),
        rdr_prob=float(np.clip(prob, 1e-12, 1.0 - 1e-12)),
        lesion_maps=torch.cat(maps).permute(0, 2, 3, 1).numpy(),
        origins=bag.origins_array(),
    )


def save_checkpoint(net: MilNet, path, epoch: int = 0, val_auc: float = float("nan"),
                    metadata: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(net.config),
        "state_dict": net.state_dict(),
        "epoch": int(epoch),
        "val_auc": float(val_auc),
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[MilNet, dict]:
    """Rebuild the network from a checkpoint; returns (net, metadata dict)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    try:
        cfg_dict = dict(payload["config"])
        cfg_dict["encoder_widths"] = tuple(cfg_dict["encoder_widths"])
        net = MilNet(MilNetConfig(**cfg_dict))
        net.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    net.eval()
    meta = {
        "epoch": payload.get("epoch", 0),
        "val_auc": payload.get("val_auc", float("nan")),
        **payload.get("metadata", {}),
    }
    return net, meta
