"""Value types and file I/O for images, dense-pose maps and masks.

Everything downstream (warping, networks, training) consumes these three
types. All of them are immutable after construction: the wrapped arrays
are marked read-only, so instances can be shared freely across workers.

Conventions:
  * images are (H, W, 3) float32, either in byte range [0, 255] or in
    signed unit range [-1, 1] (the range the tanh generator heads emit);
  * dense-pose maps carry a per-pixel body-part index in {0..24} (0 is
    background) plus continuous surface coordinates u, v in [0, 1];
  * masks are (H, W) float32 in [0, 1]; a "hard" mask contains only 0/1.

Files are 8-bit RGB rasters. Masks and dense-pose maps must use a
lossless format (PNG): lossy compression corrupts part indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

RANGE_BYTE = "byte"
RANGE_UNIT_SIGNED = "unit_signed"

# Dense-pose body surface is partitioned into 24 parts; 0 = background.
NUM_PARTS = 24

# Quantizing u,v to bytes loses at most half a step.
UV_QUANTIZATION_ERROR = 1.0 / 510.0


class InvalidIuvError(ValueError):
    """Dense-pose file content violates the part/UV contract."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """An (H, W, 3) float32 raster in a declared value range."""

    pixels: np.ndarray
    range_tag: str = RANGE_BYTE

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        lo, hi = self.bounds(self.range_tag)
        if px.size and (px.min() < lo - 1e-5 or px.max() > hi + 1e-5):
            raise ValueError(
                f"pixel values outside {self.range_tag} range "
                f"[{lo}, {hi}]: [{px.min()}, {px.max()}]"
            )
        object.__setattr__(self, "pixels", _readonly(px))

    @staticmethod
    def bounds(range_tag: str) -> tuple[float, float]:
        if range_tag == RANGE_BYTE:
            return 0.0, 255.0
        if range_tag == RANGE_UNIT_SIGNED:
            return -1.0, 1.0
        raise ValueError(f"unknown range_tag {range_tag!r}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class IuvMap:
    """Per-pixel (part index, u, v) dense-pose map.

    Background pixels (part == 0) always carry u == v == 0; the
    constructor zeroes them so the invariant holds for every instance.
    """

    part: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        part = np.asarray(self.part)
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if part.ndim != 2 or part.shape != u.shape or part.shape != v.shape:
            raise ValueError("part/u/v must share one (H, W) shape")
        if part.size and part.min() < 0 or part.size and part.max() > NUM_PARTS:
            raise InvalidIuvError(
                f"invalid part index: values must lie in 0..{NUM_PARTS}, "
                f"got max {part.max()}"
            )
        if u.size and (u.min() < 0 or u.max() > 1 or v.min() < 0 or v.max() > 1):
            raise InvalidIuvError("u/v outside [0, 1]")
        bg = part == 0
        u = np.where(bg, 0.0, u).astype(np.float32)
        v = np.where(bg, 0.0, v).astype(np.float32)
        object.__setattr__(self, "part", _readonly(part.astype(np.uint8)))
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "v", _readonly(v))

    @property
    def height(self) -> int:
        return self.part.shape[0]

    @property
    def width(self) -> int:
        return self.part.shape[1]

    def foreground(self) -> np.ndarray:
        return self.part != 0

    def to_network(self) -> np.ndarray:
        """Encode as 3 float channels in [-1, 1] for concatenation."""
        p = self.part.astype(np.float32) / NUM_PARTS * 2.0 - 1.0
        u = self.u * 2.0 - 1.0
        v = self.v * 2.0 - 1.0
        return np.stack([p, u, v], axis=-1)


@dataclass(frozen=True)
class BinaryMask:
    """An (H, W) soft-or-hard mask with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValueError(f"expected (H, W) mask, got shape {vals.shape}")
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise ValueError("mask values outside [0, 1]")
        object.__setattr__(self, "values", _readonly(vals))

    @property
    def is_hard(self) -> bool:
        v = self.values
        return bool(np.all((v == 0.0) | (v == 1.0)))

    def inverted(self) -> "BinaryMask":
        return BinaryMask(1.0 - self.values)

    def binarize(self, threshold: float = 0.5) -> "BinaryMask":
        return BinaryMask((self.values >= threshold).astype(np.float32))


# ---------------------------------------------------------------------------
# I/O


def load_image(path) -> ImageTensor:
    """Read a 3-channel raster file into a byte-range ImageTensor."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"undecodable image file {path}: {exc}") from exc
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(
            f"wrong channel count in {path}: expected 3-channel RGB, got mode {mode!r}"
        )
    return ImageTensor(arr.astype(np.float32), RANGE_BYTE)


def save_image(img: ImageTensor, path) -> None:
    """Write an image losslessly as 8-bit RGB PNG (rounds byte values)."""
    px = img.pixels
    if img.range_tag == RANGE_UNIT_SIGNED:
        px = (px + 1.0) * 127.5
    data = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path)


def to_signed(img: ImageTensor) -> ImageTensor:
    """Map byte range [0, 255] to the signed unit range via x/127.5 - 1."""
    if img.range_tag != RANGE_BYTE:
        raise ValueError(f"to_signed expects byte range, got {img.range_tag}")
    return ImageTensor(img.pixels / 127.5 - 1.0, RANGE_UNIT_SIGNED)


def to_byte(img: ImageTensor) -> ImageTensor:
    """Inverse of to_signed: (x + 1) * 127.5."""
    if img.range_tag != RANGE_UNIT_SIGNED:
        raise ValueError(f"to_byte expects unit_signed range, got {img.range_tag}")
    return ImageTensor(np.clip((img.pixels + 1.0) * 127.5, 0.0, 255.0), RANGE_BYTE)


def load_iuv(path) -> IuvMap:
    """Read a dense-pose map from a 3-channel raster file.

    Channel 0 stores the raw part index, channels 1-2 the u,v surface
    coordinates quantized as round(255 * value).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dense-pose file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:
        raise InvalidIuvError(f"undecodable dense-pose file {path}: {exc}") from exc
    if mode != "RGB" or arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidIuvError(f"dense-pose file {path} is not 3-channel RGB")
    part = arr[..., 0]
    if part.max() > NUM_PARTS:
        raise InvalidIuvError(
            f"invalid part index {int(part.max())} in {path} (max {NUM_PARTS})"
        )
    u = arr[..., 1].astype(np.float32) / 255.0
    v = arr[..., 2].astype(np.float32) / 255.0
    return IuvMap(part, u, v)


def save_iuv(iuv: IuvMap, path) -> None:
    """Write a dense-pose map as lossless 8-bit RGB PNG."""
    data = np.stack(
        [
            iuv.part,
            np.rint(iuv.u * 255.0).astype(np.uint8),
            np.rint(iuv.v * 255.0).astype(np.uint8),
        ],
        axis=-1,
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> BinaryMask:
    """Read a single-channel 8-bit mask file; 255 maps to 1.0."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mask file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"undecodable mask file {path}: {exc}") from exc
    return BinaryMask(arr.astype(np.float32) / 255.0)


def save_mask(mask: BinaryMask, path) -> None:
    data = np.clip(np.rint(mask.values * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="L").save(path)


# ---------------------------------------------------------------------------
# Pixel algebra and resizing


def mask_apply(img: ImageTensor, mask: BinaryMask) -> ImageTensor:
    """Element-wise product of every channel with the mask."""
    if img.pixels.shape[:2] != mask.values.shape:
        raise ValueError(
            f"dimension mismatch: image {img.pixels.shape[:2]} vs "
            f"mask {mask.values.shape}"
        )
    out = img.pixels * mask.values[..., None]
    return ImageTensor(out, img.range_tag)


def _center_crop_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    return arr[y0 : y0 + side, x0 : x0 + side]


def resize_image(img: ImageTensor, size: int) -> ImageTensor:
    """Center-crop to a square, then bilinearly resample to size x size."""
    arr = _center_crop_square(img.pixels)
    if arr.shape[0] == size:
        return ImageTensor(arr, img.range_tag)
    lo, hi = ImageTensor.bounds(img.range_tag)
    # PIL resampling works on float32 per channel
    chans = [
        np.asarray(
            Image.fromarray(arr[..., c]).resize((size, size), Image.BILINEAR)
        )
        for c in range(3)
    ]
    out = np.clip(np.stack(chans, axis=-1), lo, hi)
    return ImageTensor(out, img.range_tag)


def resize_mask(mask: BinaryMask, size: int) -> BinaryMask:
    arr = _center_crop_square(mask.values)
    if arr.shape[0] == size:
        return BinaryMask(arr)
    out = np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))
    return BinaryMask(np.clip(out, 0.0, 1.0))


def resize_iuv(iuv: IuvMap, size: int) -> IuvMap:
    # Nearest-neighbour on all three channels: interpolating across part
    # boundaries would invent part indices and blend unrelated UV charts.
    part = _center_crop_square(iuv.part)
    u = _center_crop_square(iuv.u)
    v = _center_crop_square(iuv.v)
    if part.shape[0] == size:
        return IuvMap(part, u, v)
    part = np.asarray(Image.fromarray(part).resize((size, size), Image.NEAREST))
    u = np.asarray(Image.fromarray(u).resize((size, size), Image.NEAREST))
    v = np.asarray(Image.fromarray(v).resize((size, size), Image.NEAREST))
    return IuvMap(part, u, v)
