"""Grid tiling of slides and patch materialization."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..errors import PatchReadError, UnsupportedResolutionError
from .records import SlideRecord, TileRef


def grid_tile_slide(slide: SlideRecord, patch_size=128, magnification=20.0, stride=None):
    """Place patch footprints on a regular row-major grid.

    stride is in target-magnification pixels (defaults to patch_size, i.e.
    no overlap). Every returned tile's footprint lies fully inside the
    slide at base level.
    """
    if stride is None:
        stride = patch_size
    if stride <= 0:
        raise ValueError("stride must be positive")
    if magnification > slide.base_magnification:
        raise UnsupportedResolutionError(
            f"slide {slide.slide_id!r}: requested {magnification}x exceeds "
            f"base {slide.base_magnification}x"
        )
    scale = slide.base_magnification / magnification
    footprint = patch_size * scale
    stride_base = stride * scale

    tiles = []
    j = 0
    while j * stride_base + footprint <= slide.base_height:
        y0 = j * stride_base
        i = 0
        while i * stride_base + footprint <= slide.base_width:
            x0 = i * stride_base
            tiles.append(
                TileRef(
                    slide_id=slide.slide_id,
                    center_x=x0 + footprint / 2.0,
                    center_y=y0 + footprint / 2.0,
                    patch_size=patch_size,
                    magnification=magnification,
                )
            )
            i += 1
        j += 1
    return tiles


def materialize_patch(tile: TileRef, store):
    """Read the tile's base-level footprint and resample to patch_size.

    Integral scale factors use exact block-mean downsampling; fractional
    factors fall back to bilinear resampling.
    """
    base_mag = store.base_magnification(tile.slide_id)
    scale = base_mag / tile.magnification
    side = int(round(tile.patch_size * scale))
    x0 = int(round(tile.center_x - side / 2.0))
    y0 = int(round(tile.center_y - side / 2.0))
    region = store.read_region(tile.slide_id, x0, y0, side, side)
    if region.shape[0] != side or region.shape[1] != side:
        raise PatchReadError(tile.slide_id, x0, y0, side, side, "short read")

    if side == tile.patch_size:
        return np.ascontiguousarray(region)
    factor = side / tile.patch_size
    if factor == int(factor):
        f = int(factor)
        p = tile.patch_size
        blocks = region.reshape(p, f, p, f, 3).astype(np.float64)
        return np.rint(blocks.mean(axis=(1, 3))).astype(np.uint8)
    img = Image.fromarray(region).resize(
        (tile.patch_size, tile.patch_size), Image.BILINEAR
    )
    return np.asarray(img, dtype=np.uint8)


def mean_saturation(image) -> float:
    """Mean HSV saturation of an RGB uint8 image, in [0, 1].

    Per pixel: (max - min) / max over the channels, 0 where max is 0.
    """
    arr = np.asarray(image, dtype=np.float64)
    cmax = arr.max(axis=2)
    cmin = arr.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / cmax, 0.0)
    return float(sat.mean())


def filter_tissue_tiles(tiles, store, min_saturation=0.05):
    """Keep tiles whose materialized patch has mean saturation above the
    threshold. min_saturation=None disables filtering.

    Slides are mostly glass; anchors drawn without this filter would be
    dominated by background.
    """
    if min_saturation is None:
        return list(tiles)
    kept = []
    for tile in tiles:
        patch = materialize_patch(tile, store)
        if mean_saturation(patch) > min_saturation:
            kept.append(tile)
    return kept
