"""Training objectives: pose-conditional GAN, reconstruction, perceptual
and Gram-style losses, plus their weighted combination.

Conventions that keep magnitudes resolution-independent:
  * every norm is evaluated as a per-element mean, not a raw sum;
  * feature-space L2 terms are unsquared distances (root mean square);
  * Gram matrices used inside the style loss are normalized by
    channels*h*w, while :func:`gram` itself returns the raw channel
    inner-product sum.

The feature extractor producing the seven tapped activations
(relu1_2 .. relu5_3, fc6, fc7) is frozen: no gradient ever reaches its
parameters. Two implementations exist; the random-weight one keeps the
test suite hermetic and accepts tiny inputs, the VGG16 one loads an
offline ImageNet weight file.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import torch
import torch.nn.functional as F
from torch import nn

FEATURE_NAMES = ("relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3", "fc6", "fc7")
SPATIAL_FEATURE_NAMES = FEATURE_NAMES[:5]


@dataclass(frozen=True)
class FeatureStack:
    """The seven tapped activations, fixed order, spatial first."""

    features: tuple

    def __post_init__(self):
        if len(self.features) != len(FEATURE_NAMES):
            raise ValueError(
                f"expected {len(FEATURE_NAMES)} features, got {len(self.features)}"
            )
        for name, feat in zip(FEATURE_NAMES, self.features):
            want = 4 if name in SPATIAL_FEATURE_NAMES else 2
            if feat.ndim != want:
                raise ValueError(
                    f"feature {name} must be {want}-dimensional, got {feat.ndim}"
                )

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.features[FEATURE_NAMES.index(name)]

    @property
    def spatial(self) -> tuple:
        return self.features[:5]


class RandomFeatureExtractor(nn.Module):
    """Small frozen conv trunk with fixed-seed random weights.

    Stands in for the pretrained extractor so perceptual/style losses
    stay valid metrics without any weight download. Pools only while the
    map is at least 2 pixels wide, so 4x4 inputs work.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64, 64), fc_dim: int = 64):
        super().__init__()
        blocks = []
        prev = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, padding=1),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.fc6 = nn.Linear(widths[-1], fc_dim)
        self.fc7 = nn.Linear(fc_dim, fc_dim)
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if p.ndim > 1:
                    # fan-in scaled so activation magnitude stays O(1)
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                    p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                else:
                    p.zero_()
        self.requires_grad_(False)
        self.eval()

    def extract(self, images: torch.Tensor) -> FeatureStack:
        """images: (B, 3, H, W) in [-1, 1]."""
        feats = []
        x = images
        for i, block in enumerate(self.blocks):
            x = block(x)
            feats.append(x)
            if i < len(self.blocks) - 1 and min(x.shape[2], x.shape[3]) >= 2:
                x = F.max_pool2d(x, 2)
        pooled = x.mean(dim=(2, 3))
        fc6 = F.relu(self.fc6(pooled))
        fc7 = F.relu(self.fc7(fc6))
        feats.extend([fc6, fc7])
        return FeatureStack(tuple(feats))

    forward = extract


class Vgg16FeatureExtractor(nn.Module):
    """VGG16 with taps at relu1_2/2_2/3_3/4_3/5_3 and the two fc layers.

    The layer layout (and state-dict keys) match the standard torchvision
    VGG16, so an offline copy of those ImageNet weights loads directly.
    Input must be at least 32 pixels on a side.
    """

    _CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
            512, 512, 512, "M", 512, 512, 512, "M"]
    _TAPS = {3: 0, 8: 1, 15: 2, 22: 3, 29: 4}  # ReLU indices -> feature slot

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path=None):
        super().__init__()
        layers = []
        prev = 3
        for item in self._CFG:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(prev, item, 3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                prev = item
        self.features = nn.Sequential(*layers)
        self.avgpool = nn.AdaptiveAvgPool2d(7)
        self.classifier = nn.Sequential(
            nn.Linear(512 * 7 * 7, 4096),
            nn.ReLU(inplace=True),
            nn.Dropout(),
            nn.Linear(4096, 4096),
            nn.ReLU(inplace=True),
            nn.Dropout(),
            nn.Linear(4096, 1000),
        )
        mean = torch.tensor(self._MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self._STD).view(1, 3, 1, 1)
        self.register_buffer("_mean", mean, persistent=False)
        self.register_buffer("_std", std, persistent=False)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            self.load_state_dict(state)
        self.requires_grad_(False)
        self.eval()

    def extract(self, images: torch.Tensor) -> FeatureStack:
        """images: (B, 3, H, W) in [-1, 1], H and W >= 32."""
        if min(images.shape[2], images.shape[3]) < 32:
            raise ValueError("pretrained extractor needs inputs of at least 32px")
        x = ((images + 1.0) / 2.0 - self._mean) / self._std
        feats: list = [None] * 5
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._TAPS:
                feats[self._TAPS[i]] = x
        x = torch.flatten(self.avgpool(x), 1)
        fc6 = self.classifier[1](self.classifier[0](x))
        fc7 = self.classifier[4](self.classifier[3](fc6))
        feats.extend([fc6, fc7])
        return FeatureStack(tuple(feats))

    forward = extract


# ---------------------------------------------------------------------------
# Adversarial losses


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """Binary cross-entropy on logits: real toward 1, fake toward 0."""
    _require_finite(real_logits, fake_logits)
    loss_real = F.binary_cross_entropy_with_logits(
        real_logits, torch.ones_like(real_logits)
    )
    loss_fake = F.binary_cross_entropy_with_logits(
        fake_logits, torch.zeros_like(fake_logits)
    )
    return loss_real + loss_fake


def generator_gan_loss(fake_logits: torch.Tensor):
    """Non-saturating generator objective: fake toward 1."""
    _require_finite(fake_logits)
    return F.binary_cross_entropy_with_logits(
        fake_logits, torch.ones_like(fake_logits)
    )


def pgan_loss(disc, real_pair, fake_pair):
    """Pose-conditional GAN losses for one (real, fake) pair of
    (image, dense pose) tuples.

    The discriminator loss sees the generated image detached; the
    generator loss keeps the graph so gradients reach the generator.
    """
    real_img, real_pose = real_pair
    fake_img, fake_pose = fake_pair
    d_real = disc(real_img, real_pose)
    d_fake = disc(fake_img.detach(), fake_pose)
    d_loss = discriminator_loss(d_real, d_fake)
    g_loss = generator_gan_loss(disc(fake_img, fake_pose))
    return d_loss, g_loss


def _require_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite network output in loss computation")


# ---------------------------------------------------------------------------
# Pixel and feature losses


def reconstruction_loss(output: torch.Tensor, target: torch.Tensor):
    """(mean absolute difference, mean squared difference)."""
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    diff = output - target
    return diff.abs().mean(), (diff * diff).mean()


def _rms_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample root-mean-square distance, averaged over the batch."""
    diff = (a - b).reshape(a.shape[0], -1)
    sq = (diff * diff).mean(dim=1)
    out = torch.zeros_like(sq)
    pos = sq > 0
    if pos.any():
        out = torch.where(pos, torch.sqrt(sq.clamp_min(1e-30)), out)
    return out.mean()


def perceptual_loss(output: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over all seven tapped layers of the feature-space distance."""
    fa = extractor.extract(output)
    fb = extractor.extract(target)
    total = output.new_zeros(())
    for a, b in zip(fa.features, fb.features):
        total = total + _rms_distance(a, b)
    return total


def gram(feature: torch.Tensor) -> torch.Tensor:
    """Channel inner-product matrix summed over spatial positions.

    Accepts one (C, H, W) spatial feature map; fc activations have no
    spatial extent and are rejected.
    """
    if feature.ndim != 3:
        raise ValueError(
            f"gram needs a (C, H, W) spatial feature map, got {feature.ndim} dims"
        )
    c = feature.shape[0]
    flat = feature.reshape(c, -1)
    return flat @ flat.T


def _normalized_grams(feature: torch.Tensor) -> torch.Tensor:
    # (B, C, H, W) -> (B, C, C), scaled by channels*h*w for comparability
    b, c, h, w = feature.shape
    flat = feature.reshape(b, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / float(c * h * w)


def style_loss(output: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over the five spatial layers of the Gram-matrix distance."""
    fa = extractor.extract(output)
    fb = extractor.extract(target)
    total = output.new_zeros(())
    for a, b in zip(fa.spatial, fb.spatial):
        total = total + _rms_distance(_normalized_grams(a), _normalized_grams(b))
    return total


# ---------------------------------------------------------------------------
# Combination


@dataclass(frozen=True)
class LossWeights:
    """Weights of the paired-branch objective; the unpaired branch uses
    only the adversarial term."""

    w_gan: float = 1.0
    w_l1: float = 10.0
    w_l2: float = 0.0
    w_perc: float = 1.0
    w_style: float = 50.0

    def __post_init__(self):
        vals = (self.w_gan, self.w_l1, self.w_l2, self.w_perc, self.w_style)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if all(v == 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


TERM_WEIGHT_MAP = {
    "g_gan": "w_gan",
    "l1": "w_l1",
    "l2": "w_l2",
    "perc": "w_perc",
    "style": "w_style",
}


def total_paired_loss(terms, weights: LossWeights):
    """Weighted sum of the paired-branch terms (missing terms count 0)."""
    total = None
    for term, attr in TERM_WEIGHT_MAP.items():
        if term not in terms:
            continue
        value = terms[term]
        if isinstance(value, torch.Tensor):
            if not torch.isfinite(value).all():
                raise ValueError(f"non-finite loss term {term!r}")
        elif not math.isfinite(value):
            raise ValueError(f"non-finite loss term {term!r}")
        contrib = getattr(weights, attr) * value
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError("no recognized loss terms supplied")
    return total
