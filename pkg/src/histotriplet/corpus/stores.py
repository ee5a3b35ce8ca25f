"""Slide pixel access.

A store resolves (slide_id, region) to base-level RGB pixels. Stores must
be safe to call from multiple workers or cheap to instantiate per worker;
the implementations here are read-only after construction.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from ..errors import PatchReadError


@runtime_checkable
class SlideStore(Protocol):
    def base_magnification(self, slide_id: str) -> float: ...

    def read_region(self, slide_id: str, x0: int, y0: int, width: int, height: int) -> np.ndarray:
        """Return uint8 pixels of shape (height, width, 3) at base level."""
        ...


class ArraySlideStore:
    """In-memory store over full uint8 arrays, keyed by slide id."""

    def __init__(self, arrays, magnification=20.0):
        self._arrays = {}
        for slide_id, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
                raise ValueError(f"slide {slide_id!r}: expected uint8 (H,W,3) array")
            self._arrays[slide_id] = arr
        if isinstance(magnification, dict):
            self._mags = dict(magnification)
        else:
            self._mags = {sid: float(magnification) for sid in self._arrays}

    def base_magnification(self, slide_id):
        try:
            return self._mags[slide_id]
        except KeyError:
            raise PatchReadError(slide_id, 0, 0, 0, 0, "unknown slide") from None

    def read_region(self, slide_id, x0, y0, width, height):
        try:
            arr = self._arrays[slide_id]
        except KeyError:
            raise PatchReadError(slide_id, x0, y0, width, height, "unknown slide") from None
        h, w = arr.shape[:2]
        if x0 < 0 or y0 < 0 or x0 + width > w or y0 + height > h:
            raise PatchReadError(
                slide_id, x0, y0, width, height, f"region outside slide ({w}x{h})"
            )
        return arr[y0 : y0 + height, x0 : x0 + width]


class ImageDirectoryStore:
    """Store backed by ordinary image files referenced by SlideRecord.path.

    Whole images are decoded lazily and cached, so this suits synthetic or
    modest-size slides stored as PNG/TIFF, not gigapixel pyramids.
    """

    def __init__(self, records, root=None):
        self._records = {r.slide_id: r for r in records}
        self._root = Path(root) if root is not None else None
        self._cache = {}

    def base_magnification(self, slide_id):
        try:
            return self._records[slide_id].base_magnification
        except KeyError:
            raise PatchReadError(slide_id, 0, 0, 0, 0, "unknown slide") from None

    def _load(self, slide_id):
        if slide_id in self._cache:
            return self._cache[slide_id]
        try:
            rec = self._records[slide_id]
        except KeyError:
            raise PatchReadError(slide_id, 0, 0, 0, 0, "unknown slide") from None
        path = Path(rec.path)
        if self._root is not None and not path.is_absolute():
            path = self._root / path
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise PatchReadError(slide_id, 0, 0, 0, 0, str(exc)) from exc
        self._cache[slide_id] = arr
        return arr

    def read_region(self, slide_id, x0, y0, width, height):
        arr = self._load(slide_id)
        h, w = arr.shape[:2]
        if x0 < 0 or y0 < 0 or x0 + width > w or y0 + height > h:
            raise PatchReadError(
                slide_id, x0, y0, width, height, f"region outside slide ({w}x{h})"
            )
        return arr[y0 : y0 + height, x0 : x0 + width]


def gradient_slide(width, height):
    """Deterministic coordinate-gradient image for pixel-level oracles.

    R encodes x, G encodes y, B encodes x+y (all mod 256).
    """
    xs = np.arange(width, dtype=np.int64)
    ys = np.arange(height, dtype=np.int64)
    r = np.broadcast_to(xs % 256, (height, width))
    g = np.broadcast_to((ys % 256)[:, None], (height, width))
    b = (xs[None, :] + ys[:, None]) % 256
    return np.stack([r, g, b], axis=2).astype(np.uint8)
