"""Dense-correspondence warping through shared UV body coordinates.

The model photo and the target pose are linked only through the body
surface parametrization: every foreground pixel of either image names a
(part, u, v) point on the body. Warping therefore means: index the model
pixels by their UV coordinates, then for each target pixel look its UV
point up in the model's chart of the same body part and interpolate.

Lookup order per target pixel:
  1. bitwise-exact (u, v) match against a source sample (first sample in
     scan order wins when several share coordinates);
  2. barycentric interpolation inside the Delaunay triangulation of the
     part's source samples;
  3. nearest source sample within NN_FALLBACK_RADIUS in UV units;
  4. otherwise the pixel stays uncovered (black, covered mask 0).

Also hosts the compositing algebra: texture-region extraction, the
warped/generated merge, and the region-of-interest split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .imagecore import RANGE_BYTE, BinaryMask, ImageTensor, IuvMap

# Nearest-neighbour fallback radius in UV units; beyond it a target pixel
# is left uncovered instead of receiving a far-away garbage colour.
NN_FALLBACK_RADIUS = 0.05

# Deterministic perturbation applied when QHull rejects degenerate input.
DEGENERACY_JITTER = 1e-6


class NoPoseCoverageError(ValueError):
    """The dense-pose map contains no foreground body pixels."""


def _uv_codes(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Bitwise-exact pair identity: pack two float32 into one uint64.
    # Adding 0.0 normalizes -0.0 to +0.0 so equal values compare equal.
    uu = (np.asarray(u, dtype=np.float32) + 0.0).view(np.uint32).astype(np.uint64)
    vv = (np.asarray(v, dtype=np.float32) + 0.0).view(np.uint32).astype(np.uint64)
    return (uu << np.uint64(32)) | vv


def _jitter(points: np.ndarray) -> np.ndarray:
    # Index-derived pseudo-random offsets; deterministic across runs.
    idx = np.arange(len(points), dtype=np.uint64)
    h1 = (idx * np.uint64(2654435761)) % np.uint64(2**32)
    h2 = (idx * np.uint64(2246822519)) % np.uint64(2**32)
    off = np.stack([h1, h2], axis=1).astype(np.float64) / 2.0**32 - 0.5
    return points + off * (2.0 * DEGENERACY_JITTER)


@dataclass
class PartChart:
    """Source samples of one body part and their UV triangulation."""

    part: int
    uv: np.ndarray        # (N, 2) all samples, image scan order
    pos: np.ndarray       # (N, 2) pixel (row, col) of each sample
    colors: np.ndarray    # (N, 3) byte-range colours
    uniq_codes: np.ndarray    # sorted packed codes of distinct UV points
    uniq_index: np.ndarray    # sample index backing each distinct point
    tri: Delaunay | None      # None when < 3 usable points or degenerate
    tri_points: np.ndarray | None  # coordinates the triangulation was built on
    simplex_ok: np.ndarray | None  # nonzero-area filter over tri.simplices
    kdtree: cKDTree

    @property
    def sample_count(self) -> int:
        return len(self.uv)


@dataclass
class UvIndex:
    """Per-part UV charts built from one (model image, dense pose) pair."""

    charts: dict[int, PartChart]
    height: int
    width: int


def _triangulate(points: np.ndarray):
    """Delaunay over distinct UV points; jitter once on degeneracy."""
    if len(points) < 3:
        return None, None, None
    for attempt, pts in enumerate((points, _jitter(points))):
        try:
            tri = Delaunay(pts)
        except QhullError:
            continue
        if len(tri.simplices) == 0:
            continue
        a, b, c = (pts[tri.simplices[:, k]] for k in range(3))
        area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (
            b[:, 1] - a[:, 1]
        ) * (c[:, 0] - a[:, 0])
        ok = area2 != 0.0
        if not ok.any():
            continue
        return tri, pts, ok
    return None, None, None


def build_uv_index(model_img: ImageTensor, model_iuv: IuvMap) -> UvIndex:
    """Bucket every foreground model pixel by body part, keyed by UV."""
    if (model_img.height, model_img.width) != (model_iuv.height, model_iuv.width):
        raise ValueError(
            f"dimension mismatch: image {model_img.pixels.shape[:2]} vs "
            f"dense pose {model_iuv.part.shape}"
        )
    if not model_iuv.foreground().any():
        raise NoPoseCoverageError("no dense pose coverage in model image")

    charts: dict[int, PartChart] = {}
    for part in np.unique(model_iuv.part):
        part = int(part)
        if part == 0:
            continue
        rows, cols = np.nonzero(model_iuv.part == part)
        uv = np.stack(
            [model_iuv.u[rows, cols], model_iuv.v[rows, cols]], axis=1
        ).astype(np.float64)
        colors = model_img.pixels[rows, cols].astype(np.float64)
        codes = _uv_codes(uv[:, 0], uv[:, 1])
        uniq_codes, uniq_index = np.unique(codes, return_index=True)
        uniq_uv = uv[uniq_index]
        tri, tri_points, simplex_ok = _triangulate(uniq_uv)
        charts[part] = PartChart(
            part=part,
            uv=uv,
            pos=np.stack([rows, cols], axis=1),
            colors=colors,
            uniq_codes=uniq_codes,
            uniq_index=uniq_index,
            tri=tri,
            tri_points=tri_points,
            simplex_ok=simplex_ok,
            kdtree=cKDTree(uniq_uv),
        )
    return UvIndex(charts=charts, height=model_img.height, width=model_img.width)


def warp(index: UvIndex, person_iuv: IuvMap) -> tuple[ImageTensor, BinaryMask]:
    """Transport indexed model colours onto the target dense pose.

    Returns the warped image (byte range, black where uncovered) and the
    hard coverage mask. A target pixel only ever receives colour from
    source samples of its own body part.
    """
    h, w = person_iuv.part.shape
    if (index.height, index.width) != (h, w):
        raise ValueError(
            f"dimension mismatch: index {index.height}x{index.width} vs "
            f"target pose {h}x{w}"
        )
    out = np.zeros((h, w, 3), dtype=np.float64)
    covered = np.zeros((h, w), dtype=np.float32)

    for part in np.unique(person_iuv.part):
        part = int(part)
        if part == 0:
            continue
        chart = index.charts.get(part)
        if chart is None:
            continue
        rows, cols = np.nonzero(person_iuv.part == part)
        qu = person_iuv.u[rows, cols]
        qv = person_iuv.v[rows, cols]
        qcolor, qhit = _resolve_part(chart, qu.astype(np.float64), qv.astype(np.float64))
        out[rows[qhit], cols[qhit]] = qcolor[qhit]
        covered[rows[qhit], cols[qhit]] = 1.0

    return ImageTensor(np.clip(out, 0, 255), RANGE_BYTE), BinaryMask(covered)


def _resolve_part(chart: PartChart, qu, qv) -> tuple[np.ndarray, np.ndarray]:
    n = len(qu)
    color = np.zeros((n, 3), dtype=np.float64)
    hit = np.zeros(n, dtype=bool)

    # 1. exact UV coincidence (first source sample in scan order wins)
    codes = _uv_codes(qu, qv)
    pos = np.searchsorted(chart.uniq_codes, codes)
    pos_clipped = np.minimum(pos, len(chart.uniq_codes) - 1)
    exact = chart.uniq_codes[pos_clipped] == codes
    src = chart.uniq_index[pos_clipped[exact]]
    color[exact] = chart.colors[src]
    hit[exact] = True

    # 2. barycentric interpolation inside the part triangulation
    pending = ~hit
    if chart.tri is not None and pending.any():
        q = np.stack([qu[pending], qv[pending]], axis=1)
        simplex = chart.tri.find_simplex(q)
        inside = simplex >= 0
        if inside.any():
            inside &= chart.simplex_ok[np.maximum(simplex, 0)]
        if inside.any():
            sidx = simplex[inside]
            # affine transform per simplex: b = T (x - r), w = (b0, b1, 1-b0-b1)
            T = chart.tri.transform[sidx]
            delta = q[inside] - T[:, 2]
            b = np.einsum("nij,nj->ni", T[:, :2], delta)
            weights = np.concatenate([b, 1.0 - b.sum(axis=1, keepdims=True)], axis=1)
            verts = chart.tri.simplices[sidx]
            vert_colors = chart.colors[chart.uniq_index[verts]]
            blended = np.einsum("nk,nkc->nc", weights, vert_colors)
            tgt = np.nonzero(pending)[0][inside]
            color[tgt] = blended
            hit[tgt] = True
            pending = ~hit

    # 3. nearest neighbour within the UV fallback radius
    if pending.any():
        q = np.stack([qu[pending], qv[pending]], axis=1)
        dist, nn = chart.kdtree.query(q)
        near = dist <= NN_FALLBACK_RADIUS
        if near.any():
            tgt = np.nonzero(pending)[0][near]
            color[tgt] = chart.colors[chart.uniq_index[nn[near]]]
            hit[tgt] = True

    return color, hit


def texture_region(
    warped: ImageTensor,
    background_color=(0.0, 0.0, 0.0),
    tol: float = 8.0,
) -> BinaryMask:
    """Hard mask of pixels that differ from the background colour.

    A pixel belongs to the texture region when its max-channel distance
    from `background_color` exceeds `tol` (both in the image's own value
    units; the default 8/255 tolerance suits byte-range warp output).
    """
    bg = np.asarray(background_color, dtype=np.float32).reshape(1, 1, 3)
    dist = np.abs(warped.pixels - bg).max(axis=-1)
    return BinaryMask((dist > tol).astype(np.float32))


def merge_textures(
    warped: ImageTensor, aligned: ImageTensor, region: BinaryMask
) -> ImageTensor:
    """Composite: warped texture where the region mask is 1, generated
    image elsewhere. Pure per-pixel interpolation algebra."""
    if warped.pixels.shape != aligned.pixels.shape:
        raise ValueError(
            f"dimension mismatch: {warped.pixels.shape} vs {aligned.pixels.shape}"
        )
    if warped.range_tag != aligned.range_tag:
        raise ValueError(
            f"range mismatch: {warped.range_tag} vs {aligned.range_tag}"
        )
    if warped.pixels.shape[:2] != region.values.shape:
        raise ValueError("region mask dimensions do not match the images")
    r = region.values[..., None]
    out = warped.pixels * r + aligned.pixels * (1.0 - r)
    return ImageTensor(out, warped.range_tag)


def roi_split(
    refined: ImageTensor, person: ImageTensor, roi: BinaryMask
) -> tuple[ImageTensor, ImageTensor]:
    """Split into (refined garment inside RoI, person outside RoI)."""
    if refined.pixels.shape != person.pixels.shape:
        raise ValueError(
            f"dimension mismatch: {refined.pixels.shape} vs {person.pixels.shape}"
        )
    if refined.pixels.shape[:2] != roi.values.shape:
        raise ValueError("roi mask dimensions do not match the images")
    inside = ImageTensor(refined.pixels * roi.values[..., None], refined.range_tag)
    outside = ImageTensor(
        person.pixels * (1.0 - roi.values)[..., None], person.range_tag
    )
    return inside, outside
