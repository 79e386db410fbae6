"""Dataset manifests, pairing, unpaired sampling and synthetic fixtures.

Directory layout consumed by :func:`build_manifest`::

    <root>/<identity>/<outfit>/<pose>.image.png   photo
    <root>/<identity>/<outfit>/<pose>.iuv.png     dense-pose map
    <root>/<identity>/<outfit>/<pose>.mask.png    clothes parsing mask

A manifest is a line-delimited text file: a ``#split=`` / ``#root=``
header followed by one tab-separated record per line with root-relative
paths (see :func:`save_manifest`).

:func:`synth_fixture` procedurally generates a dataset in this layout:
stick figures made of rotated rectangles, with the dense-pose map
derived analytically from the same rectangle parametrization and the
garment texture defined in UV space, so that two poses of one identity
are exact UV-resamplings of each other. That makes the warping identity
property, paired training and the RoI pseudo ground truth all hold by
construction, with no external dataset or model.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import imagecore
from .imagecore import BinaryMask, ImageTensor, IuvMap

log = logging.getLogger(__name__)

# Body-part indices emitted by the fixture generator.
PART_TORSO = 1
PART_HEAD = 2
PART_ARM_L = 3
PART_ARM_R = 4
PART_LEG_L = 5
PART_LEG_R = 6

# Parts whose dense-pose region joins the clothes mask in the RoI union.
FIXTURE_UPPER_PARTS = (PART_TORSO, PART_ARM_L, PART_ARM_R)

_IMAGE_SUFFIX = ".image.png"
_IUV_SUFFIX = ".iuv.png"
_MASK_SUFFIX = ".mask.png"


@dataclass(frozen=True)
class SampleRecord:
    identity_id: str
    outfit_id: str
    pose_id: str
    image_path: Path
    iuv_path: Path
    parsing_mask_path: Path | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.identity_id, self.outfit_id, self.pose_id)


@dataclass(frozen=True)
class Manifest:
    records: tuple
    split: str = "train"
    root: Path | None = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("empty manifest")
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (identity, outfit, pose) records")

    def identities(self) -> list[str]:
        return sorted({r.identity_id for r in self.records})

    def by_identity(self) -> dict[str, list[SampleRecord]]:
        out: dict[str, list[SampleRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.identity_id, []).append(rec)
        return out


def build_manifest(root, split: str = "train") -> Manifest:
    """Scan the documented directory layout into a manifest.

    Entries missing one of the three files are reported and skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset root: {root}")
    records = []
    for image_path in sorted(root.glob(f"*/*/*{_IMAGE_SUFFIX}")):
        pose = image_path.name[: -len(_IMAGE_SUFFIX)]
        outfit_dir = image_path.parent
        iuv_path = outfit_dir / f"{pose}{_IUV_SUFFIX}"
        mask_path = outfit_dir / f"{pose}{_MASK_SUFFIX}"
        if not iuv_path.exists() or not mask_path.exists():
            missing = _IUV_SUFFIX if not iuv_path.exists() else _MASK_SUFFIX
            log.warning("skipping incomplete entry %s (missing %s)", image_path, missing)
            continue
        for path in (image_path, iuv_path, mask_path):
            try:
                with Image.open(path):
                    pass
            except (UnidentifiedImageError, OSError) as exc:
                raise ValueError(f"unreadable file {path}: {exc}") from exc
        records.append(
            SampleRecord(
                identity_id=outfit_dir.parent.name,
                outfit_id=outfit_dir.name,
                pose_id=pose,
                image_path=image_path,
                iuv_path=iuv_path,
                parsing_mask_path=mask_path,
            )
        )
    if not records:
        raise ValueError(f"empty manifest: no complete entries under {root}")
    return Manifest(records=tuple(records), split=split, root=root)


def save_manifest(manifest: Manifest, path) -> None:
    """Write the line-delimited manifest format (paths relative to root)."""
    path = Path(path)
    root = manifest.root or Path(".")
    lines = [f"#split={manifest.split}", f"#root={root}"]
    for r in manifest.records:
        mask = r.parsing_mask_path.relative_to(root) if r.parsing_mask_path else "-"
        lines.append(
            "\t".join(
                [
                    r.identity_id,
                    r.outfit_id,
                    r.pose_id,
                    str(r.image_path.relative_to(root)),
                    str(r.iuv_path.relative_to(root)),
                    str(mask),
                ]
            )
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    split, root = "train", Path(".")
    records = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#split="):
            split = line.split("=", 1)[1]
            continue
        if line.startswith("#root="):
            root = Path(line.split("=", 1)[1])
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ValueError(f"malformed manifest line: {line!r}")
        identity, outfit, pose, image, iuv, mask = fields
        records.append(
            SampleRecord(
                identity_id=identity,
                outfit_id=outfit,
                pose_id=pose,
                image_path=root / image,
                iuv_path=root / iuv,
                parsing_mask_path=None if mask == "-" else root / mask,
            )
        )
    return Manifest(records=tuple(records), split=split, root=root)


def pair_same_identity(manifest: Manifest) -> list:
    """All ordered pairs sharing identity and outfit with different poses."""
    groups: dict[tuple[str, str], list[SampleRecord]] = {}
    for rec in sorted(manifest.records, key=lambda r: r.key):
        groups.setdefault((rec.identity_id, rec.outfit_id), []).append(rec)
    pairs = []
    for key in sorted(groups):
        members = groups[key]
        for a in members:
            for b in members:
                if a.pose_id != b.pose_id:
                    pairs.append((a, b))
    return pairs


def sample_unpaired(manifest: Manifest, seed: int):
    """Endless reproducible stream of cross-identity (model, person) pairs.

    Identities are drawn uniformly, then one record uniformly within
    each identity, so no identity is over-represented.
    """
    by_id = manifest.by_identity()
    ids = sorted(by_id)
    if len(ids) < 2:
        raise ValueError("unpaired sampling needs at least 2 distinct identities")
    for recs in by_id.values():
        recs.sort(key=lambda r: r.key)
    rng = random.Random(seed)
    while True:
        model_id = ids[rng.randrange(len(ids))]
        person_id = model_id
        while person_id == model_id:
            person_id = ids[rng.randrange(len(ids))]
        model = by_id[model_id][rng.randrange(len(by_id[model_id]))]
        person = by_id[person_id][rng.randrange(len(by_id[person_id]))]
        yield model, person


# ---------------------------------------------------------------------------
# Synthetic fixture generation


@dataclass(frozen=True)
class _RectPart:
    """A rotated rectangle: anchor point, direction angle, length, width.

    UV coordinates inside the rectangle are (distance along the axis / L,
    signed distance across / W + 0.5), both in [0, 1].
    """

    part: int
    anchor: tuple[float, float]  # (x, y) in pixels
    angle: float                 # radians, 0 = pointing down (+y)
    length: float
    width: float

    def rasterize(self, size: int):
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        dx = xx - self.anchor[0]
        dy = yy - self.anchor[1]
        s, c = math.sin(self.angle), math.cos(self.angle)
        along = dx * s + dy * c
        across = dx * c - dy * s
        inside = (
            (along >= 0)
            & (along <= self.length)
            & (np.abs(across) <= self.width / 2)
        )
        u = np.clip(along / self.length, 0.0, 1.0)
        v = np.clip(across / self.width + 0.5, 0.0, 1.0)
        return inside, u, v


def _identity_style(seed: int, identity: int, outfit: int) -> dict:
    rng = random.Random(seed * 1_000_003 + identity * 977 + outfit * 31)
    def color(lo=40, hi=230):
        return np.array([rng.randint(lo, hi) for _ in range(3)], dtype=np.float64)
    skin = np.array([rng.randint(150, 230), rng.randint(110, 180), rng.randint(90, 150)],
                    dtype=np.float64)
    return {
        "skin": skin,
        "garment_a": color(),
        "garment_b": color(),
        "logo": color(),
        "pants": color(20, 160),
        "stripes": rng.randint(3, 6),
        "logo_center": (0.35 + 0.3 * rng.random(), 0.35 + 0.3 * rng.random()),
        "logo_radius": 0.12 + 0.08 * rng.random(),
        "scale": 0.9 + 0.2 * rng.random(),
    }


def _texture(style: dict, part: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Colour every pixel from its (part, u, v) coordinates alone."""
    h, w = part.shape
    out = np.full((h, w, 3), 235.0)
    skin = style["skin"]
    shade = (0.8 + 0.35 * u)[..., None]

    for p in (PART_HEAD, PART_ARM_L, PART_ARM_R):
        m = part == p
        out[m] = np.clip(skin * shade[m], 0, 255)

    torso = part == PART_TORSO
    if torso.any():
        k = style["stripes"]
        stripe = (np.floor(u * k) + np.floor(v * k)).astype(np.int64) % 2 == 0
        tex = np.where(stripe[..., None], style["garment_a"], style["garment_b"])
        cu, cv = style["logo_center"]
        logo = (u - cu) ** 2 + (v - cv) ** 2 < style["logo_radius"] ** 2
        tex = np.where(logo[..., None], style["logo"], tex)
        out[torso] = tex[torso]

    for p in (PART_LEG_L, PART_LEG_R):
        m = part == p
        out[m] = np.clip(style["pants"] * shade[m], 0, 255)
    return out


def _pose_parts(style: dict, pose: int, size: int) -> list:
    s = size * style["scale"]
    # deterministic per-pose variation, bounded so all parts stay in frame
    # and so limbs clear the torso rectangle (arms angle well outward)
    sway = 0.04 * math.sin(2.1 * pose + 0.7)
    lean = math.radians(6.0 * math.sin(1.3 * pose))
    cx = size * (0.5 + sway)
    neck_y = size * 0.28
    torso_l, torso_w = 0.32 * s, 0.20 * s
    arm_spread = math.radians(45 + 18 * math.sin(1.9 * pose + 1.0))
    leg_spread = math.radians(10 + 5 * math.cos(1.1 * pose))

    d = (math.sin(lean), math.cos(lean))
    perp = (math.cos(lean), -math.sin(lean))
    hip = (cx + d[0] * torso_l, neck_y + d[1] * torso_l)
    sh_off = torso_w / 2 + 0.02 * s
    shoulder_l = (cx - perp[0] * sh_off, neck_y - perp[1] * sh_off)
    shoulder_r = (cx + perp[0] * sh_off, neck_y + perp[1] * sh_off)
    hip_off = torso_w / 3
    hip_l = (hip[0] - perp[0] * hip_off, hip[1] - perp[1] * hip_off)
    hip_r = (hip[0] + perp[0] * hip_off, hip[1] + perp[1] * hip_off)

    return [
        _RectPart(PART_LEG_L, hip_l, lean - leg_spread, 0.28 * s, 0.085 * s),
        _RectPart(PART_LEG_R, hip_r, lean + leg_spread, 0.28 * s, 0.085 * s),
        _RectPart(PART_ARM_L, shoulder_l, lean - arm_spread, 0.26 * s, 0.075 * s),
        _RectPart(PART_ARM_R, shoulder_r, lean + arm_spread, 0.26 * s, 0.075 * s),
        _RectPart(PART_TORSO, (cx, neck_y), lean, torso_l, torso_w),
        _RectPart(
            PART_HEAD,
            (cx - d[0] * 0.13 * s, neck_y - d[1] * 0.13 * s),
            lean,
            0.12 * s,
            0.11 * s,
        ),
    ]


def render_sample(seed: int, identity: int, outfit: int, pose: int, size: int):
    """One synthetic (image, dense pose, clothes mask) triple."""
    style = _identity_style(seed, identity, outfit)
    part_map = np.zeros((size, size), dtype=np.uint8)
    u_map = np.zeros((size, size), dtype=np.float64)
    v_map = np.zeros((size, size), dtype=np.float64)
    for rect in _pose_parts(style, pose, size):
        inside, u, v = rect.rasterize(size)
        part_map[inside] = rect.part
        u_map[inside] = u[inside]
        v_map[inside] = v[inside]
    # quantize UV exactly as the file format will store it, and render the
    # image from the quantized values: image and dense-pose file agree
    # bit-for-bit, so UV-space resampling reproduces colours exactly
    u_q = np.rint(u_map * 255.0) / 255.0
    v_q = np.rint(v_map * 255.0) / 255.0
    pixels = _texture(style, part_map, u_q, v_q)
    pixels[part_map == 0] = 235.0
    image = ImageTensor(pixels, imagecore.RANGE_BYTE)
    iuv = IuvMap(part_map, u_q.astype(np.float32), v_q.astype(np.float32))
    clothes = BinaryMask((part_map == PART_TORSO).astype(np.float32))
    return image, iuv, clothes


def synth_fixture(
    seed: int,
    n_identities: int,
    n_poses: int,
    size: int,
    root,
) -> Path:
    """Generate a complete toy dataset tree; byte-identical per seed."""
    if size < 32:
        raise ValueError("fixture size must be at least 32")
    root = Path(root)
    for identity in range(n_identities):
        for pose in range(n_poses):
            image, iuv, clothes = render_sample(seed, identity, 0, pose, size)
            base = root / f"id{identity}" / "o0" / f"p{pose}"
            imagecore.save_image(image, base.with_name(base.name + _IMAGE_SUFFIX))
            imagecore.save_iuv(iuv, base.with_name(base.name + _IUV_SUFFIX))
            imagecore.save_mask(clothes, base.with_name(base.name + _MASK_SUFFIX))
    return root
