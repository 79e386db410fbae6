"""Trainable architectures and the torch tensor boundary.

Five networks, all built from one encoder / residual / decoder template:

  * PoseAligner        12ch in  -> 3ch tanh   re-renders the model image in
                                              the target pose
  * TextureRefiner      4ch in  -> 3ch tanh   smooths the seam of the merged
                                              warped/generated composite
  * RoiGenerator        6ch in  -> 1ch sigmoid predicts the replacement region
                                              on the person
  * FittingNetwork      6ch in  -> 3ch tanh   composites the refined garment
                                              into the person image
  * PoseConditionalDiscriminator 6ch -> logit grid, scores an image together
                                              with its dense pose

Channel counts are contracts: construction and forward both reject
mismatches. Generators keep spatial size; the encoder reaches quarter
resolution at 4x base width (256 features at the default width 64).
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib

import numpy as np
import torch
from torch import nn

from .imagecore import (
    RANGE_BYTE,
    RANGE_UNIT_SIGNED,
    BinaryMask,
    ImageTensor,
    IuvMap,
)


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape contract of one encoder-residual-decoder generator."""

    in_channels: int
    out_channels: int = 3
    base_width: int = 64
    residual_blocks: int = 6
    head: str = "tanh"  # "tanh" -> [-1,1]; "sigmoid" -> [0,1]

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.base_width < 1 or self.residual_blocks < 0:
            raise ValueError("invalid width or residual count")
        if self.head not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Shape contract of the patch-style conditional discriminator."""

    in_channels: int = 6
    base_width: int = 64


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class EncoderDecoderGenerator(nn.Module):
    """3-layer encoder to quarter resolution, residual trunk, 3-layer decoder."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.encoder = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 7, padding=3),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        )
        self.trunk = nn.Sequential(
            *[ResidualBlock(4 * w) for _ in range(spec.residual_blocks)]
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, spec.out_channels, 7, padding=3),
        )
        self.head = nn.Tanh() if spec.head == "tanh" else nn.Sigmoid()

    def forward(self, x):
        _check_finite(x)
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )
        return self.head(self.decoder(self.trunk(self.encoder(x))))


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite values in network input")


def _check_image_batch(t: torch.Tensor, channels: int, name: str) -> None:
    if t.ndim != 4 or t.shape[1] != channels:
        raise ValueError(
            f"{name}: expected (B, {channels}, H, W) tensor, got {tuple(t.shape)}"
        )


class PoseAligner(nn.Module):
    """Generates the pose-aligned model image from the 12-channel stack
    (model image, model pose, target pose, warped model image)."""

    IN_CHANNELS = 12

    def __init__(self, spec: GeneratorSpec | None = None, base_width: int = 64,
                 residual_blocks: int = 6):
        super().__init__()
        if spec is None:
            spec = GeneratorSpec(self.IN_CHANNELS, 3, base_width, residual_blocks)
        if spec.in_channels != self.IN_CHANNELS or spec.out_channels != 3:
            raise ValueError(
                f"pose aligner requires {self.IN_CHANNELS}->3 channels, "
                f"got {spec.in_channels}->{spec.out_channels}"
            )
        self.net = EncoderDecoderGenerator(spec)

    def forward(self, model_img, model_pose, person_pose, warped):
        for name, t in (
            ("model_img", model_img),
            ("model_pose", model_pose),
            ("person_pose", person_pose),
            ("warped", warped),
        ):
            _check_image_batch(t, 3, name)
            _check_finite(t)
        return self.net(torch.cat([model_img, model_pose, person_pose, warped], dim=1))


class TextureRefiner(nn.Module):
    """Refines the merged composite; sees the merge plus the texture-region
    mask so it knows where the seams run."""

    IN_CHANNELS = 4

    def __init__(self, spec: GeneratorSpec | None = None, base_width: int = 64,
                 residual_blocks: int = 6):
        super().__init__()
        if spec is None:
            spec = GeneratorSpec(self.IN_CHANNELS, 3, base_width, residual_blocks)
        if spec.in_channels != self.IN_CHANNELS or spec.out_channels != 3:
            raise ValueError(
                f"texture refiner requires {self.IN_CHANNELS}->3 channels, "
                f"got {spec.in_channels}->{spec.out_channels}"
            )
        self.net = EncoderDecoderGenerator(spec)

    def forward(self, merged, region):
        _check_image_batch(merged, 3, "merged")
        _check_image_batch(region, 1, "region")
        _check_finite(merged, region)
        return self.net(torch.cat([merged, region], dim=1))


class RoiGenerator(nn.Module):
    """Predicts the soft replacement region from the person image and its
    dense pose; sigmoid head, binarize at 0.5 for hard use."""

    IN_CHANNELS = 6

    def __init__(self, spec: GeneratorSpec | None = None, base_width: int = 64,
                 residual_blocks: int = 6):
        super().__init__()
        if spec is None:
            spec = GeneratorSpec(
                self.IN_CHANNELS, 1, base_width, residual_blocks, head="sigmoid"
            )
        if (
            spec.in_channels != self.IN_CHANNELS
            or spec.out_channels != 1
            or spec.head != "sigmoid"
        ):
            raise ValueError(
                "roi generator requires 6->1 channels with a sigmoid head"
            )
        self.net = EncoderDecoderGenerator(spec)

    def forward(self, person_img, person_pose):
        _check_image_batch(person_img, 3, "person_img")
        _check_image_batch(person_pose, 3, "person_pose")
        _check_finite(person_img, person_pose)
        return self.net(torch.cat([person_img, person_pose], dim=1))


class FittingNetwork(nn.Module):
    """Composites the masked refined garment and the masked person image
    (6 channels total) into the final try-on output."""

    IN_CHANNELS = 6

    def __init__(self, spec: GeneratorSpec | None = None, base_width: int = 64,
                 residual_blocks: int = 6):
        super().__init__()
        if spec is None:
            spec = GeneratorSpec(self.IN_CHANNELS, 3, base_width, residual_blocks)
        if spec.in_channels != self.IN_CHANNELS or spec.out_channels != 3:
            raise ValueError(
                f"fitting network requires {self.IN_CHANNELS}->3 channels, "
                f"got {spec.in_channels}->{spec.out_channels}"
            )
        self.net = EncoderDecoderGenerator(spec)

    def forward(self, garment_in_roi, person_outside_roi):
        _check_image_batch(garment_in_roi, 3, "garment_in_roi")
        _check_image_batch(person_outside_roi, 3, "person_outside_roi")
        _check_finite(garment_in_roi, person_outside_roi)
        return self.net(torch.cat([garment_in_roi, person_outside_roi], dim=1))


class PoseConditionalDiscriminator(nn.Module):
    """Patch discriminator over the (image, dense pose) concatenation.

    Four 4x4 convolution stages (three stride-2, one stride-1, no norm on
    the first) and a final projection produce an unbounded logit grid:
    30x30 for 256-pixel input.
    """

    IN_CHANNELS = 6

    def __init__(self, spec: DiscriminatorSpec | None = None, base_width: int = 64):
        super().__init__()
        if spec is None:
            spec = DiscriminatorSpec(base_width=base_width)
        if spec.in_channels != self.IN_CHANNELS:
            raise ValueError(
                f"discriminator requires {self.IN_CHANNELS} input channels, "
                f"got {spec.in_channels}"
            )
        self.spec = spec
        w = spec.base_width
        self.net = nn.Sequential(
            nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 8 * w, 4, stride=1, padding=1),
            nn.InstanceNorm2d(8 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * w, 1, 4, stride=1, padding=1),
        )

    def forward(self, image, pose):
        _check_image_batch(image, 3, "image")
        _check_image_batch(pose, 3, "pose")
        _check_finite(image, pose)
        return self.net(torch.cat([image, pose], dim=1))


# ---------------------------------------------------------------------------
# Initialization and identity


INIT_STD = 0.02


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """Deterministic zero-mean Gaussian init (std 0.02), zero biases.

    Equal seeds give bit-identical parameters regardless of how the
    module was constructed.
    """
    gen = torch.Generator().manual_seed(seed)
    for _, param in sorted(net.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim > 1:
                param.normal_(0.0, INIT_STD, generator=gen)
            else:
                param.zero_()
    return net


def parameter_checksum(net: nn.Module) -> str:
    """SHA-256 over parameter names and little-endian float32 payloads."""
    digest = hashlib.sha256()
    for name, param in net.named_parameters():
        digest.update(name.encode())
        data = param.detach().cpu().numpy().astype("<f4", copy=False)
        digest.update(data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Region-of-interest pseudo ground truth


def union_roi(clothes_mask: BinaryMask, iuv: IuvMap, upper_parts) -> BinaryMask:
    """Union of the parsed clothes mask and the dense-pose body region
    covering `upper_parts`, used as pseudo ground truth for the RoI net."""
    if clothes_mask.values.shape != iuv.part.shape:
        raise ValueError(
            f"dimension mismatch: mask {clothes_mask.values.shape} vs "
            f"dense pose {iuv.part.shape}"
        )
    parts = np.isin(iuv.part, list(upper_parts)).astype(np.float32)
    return BinaryMask(np.maximum(clothes_mask.values, parts))


# ---------------------------------------------------------------------------
# Torch boundary: domain values <-> (C, H, W) float tensors


def image_to_tensor(img: ImageTensor) -> torch.Tensor:
    """ImageTensor -> (3, H, W) float32 in [-1, 1]."""
    px = img.pixels
    if img.range_tag == RANGE_BYTE:
        px = px / 127.5 - 1.0
    return torch.from_numpy(px.transpose(2, 0, 1).copy()).float()


def tensor_to_image(t: torch.Tensor) -> ImageTensor:
    """(3, H, W) network output -> unit-signed ImageTensor (clamped)."""
    arr = t.detach().cpu().clamp(-1.0, 1.0).numpy().transpose(1, 2, 0)
    return ImageTensor(arr, RANGE_UNIT_SIGNED)


def iuv_to_tensor(iuv: IuvMap) -> torch.Tensor:
    """IuvMap -> (3, H, W) float32 in [-1, 1]."""
    enc = iuv.to_network().transpose(2, 0, 1)
    return torch.from_numpy(enc.copy()).float()


def mask_to_tensor(mask: BinaryMask) -> torch.Tensor:
    """BinaryMask -> (1, H, W) float32 in [0, 1]."""
    return torch.from_numpy(mask.values[None].copy()).float()


def tensor_to_mask(t: torch.Tensor) -> BinaryMask:
    """(1, H, W) or (H, W) tensor -> BinaryMask (clamped)."""
    arr = t.detach().cpu().clamp(0.0, 1.0).numpy()
    if arr.ndim == 3:
        arr = arr[0]
    return BinaryMask(arr)
