"""Slide and tile records plus their line-delimited manifests.

A slide manifest has one JSON object per line with keys
slide_id, organ_site, subtype, base_width, base_height,
base_magnification, path. Tile manifests use the same convention with
the TileRef fields.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

from ..errors import ManifestParseError, RecordValidationError
from ..manifests import read_jsonl, write_jsonl

ORGAN_SITES = ("prostate", "gastrointestinal", "lung", "other")

# TCGA cancer subtypes grouped by anatomical site.
SUBTYPE_TO_ORGAN = {
    "PRAD": "prostate",
    "TGCT": "prostate",
    "ESCA": "gastrointestinal",
    "STAD": "gastrointestinal",
    "COAD": "gastrointestinal",
    "READ": "gastrointestinal",
    "LUAD": "lung",
    "LUSC": "lung",
    "MESO": "lung",
}

UNLABELED = "unlabeled"


@dataclass(frozen=True)
class SlideRecord:
    """One whole-slide image: identity, diagnosis labels, base geometry."""

    slide_id: str
    organ_site: str
    subtype: str
    base_width: int
    base_height: int
    base_magnification: float
    path: str = ""

    def __post_init__(self):
        if self.base_width <= 0 or self.base_height <= 0:
            raise RecordValidationError(
                f"slide {self.slide_id!r}: base dimensions must be positive, "
                f"got {self.base_width}x{self.base_height}"
            )
        if self.base_magnification <= 0:
            raise RecordValidationError(
                f"slide {self.slide_id!r}: base_magnification must be positive"
            )
        if self.organ_site not in ORGAN_SITES:
            raise RecordValidationError(
                f"slide {self.slide_id!r}: unknown organ_site {self.organ_site!r}"
            )
        if self.subtype != UNLABELED:
            expected = SUBTYPE_TO_ORGAN[self.subtype]
            if expected != self.organ_site:
                raise RecordValidationError(
                    f"slide {self.slide_id!r}: subtype {self.subtype} implies "
                    f"organ_site {expected!r}, got {self.organ_site!r}"
                )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TileRef:
    """A patch location: center in base-level pixels, size at target magnification."""

    slide_id: str
    center_x: float
    center_y: float
    patch_size: int = 128
    magnification: float = 20.0

    def __post_init__(self):
        if self.patch_size <= 0:
            raise RecordValidationError("patch_size must be positive")

    def footprint(self, base_magnification: float):
        """Patch extent in base-level pixels as (x0, y0, x1, y1)."""
        scale = base_magnification / self.magnification
        half = self.patch_size * scale / 2.0
        return (
            self.center_x - half,
            self.center_y - half,
            self.center_x + half,
            self.center_y + half,
        )

    def fits_inside(self, slide: SlideRecord) -> bool:
        x0, y0, x1, y1 = self.footprint(slide.base_magnification)
        return x0 >= 0 and y0 >= 0 and x1 <= slide.base_width and y1 <= slide.base_height

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            slide_id=d["slide_id"],
            center_x=float(d["center_x"]),
            center_y=float(d["center_y"]),
            patch_size=int(d.get("patch_size", 128)),
            magnification=float(d.get("magnification", 20.0)),
        )


_MANIFEST_KEYS = (
    "slide_id",
    "organ_site",
    "subtype",
    "base_width",
    "base_height",
    "base_magnification",
    "path",
)


def index_slides(manifest_path):
    """Read a slide manifest into SlideRecords.

    Records whose subtype is not one of the known TCGA subtypes come back
    as "unlabeled". A subtype/organ mismatch raises RecordValidationError;
    malformed lines raise ManifestParseError with the line number.
    """
    records = []
    for lineno, obj in read_jsonl(manifest_path):
        missing = [k for k in _MANIFEST_KEYS if k not in obj and k != "path"]
        if missing:
            raise ManifestParseError(
                manifest_path, lineno, f"missing keys: {', '.join(missing)}"
            )
        subtype = str(obj["subtype"])
        if subtype not in SUBTYPE_TO_ORGAN:
            subtype = UNLABELED
        try:
            rec = SlideRecord(
                slide_id=str(obj["slide_id"]),
                organ_site=str(obj["organ_site"]),
                subtype=subtype,
                base_width=int(obj["base_width"]),
                base_height=int(obj["base_height"]),
                base_magnification=float(obj["base_magnification"]),
                path=str(obj.get("path", "")),
            )
        except (TypeError, ValueError) as exc:
            raise ManifestParseError(manifest_path, lineno, str(exc)) from exc
        records.append(rec)
    return records


def write_slide_manifest(path, records):
    return write_jsonl(path, [r.to_dict() for r in records])


def write_tile_manifest(path, tiles):
    return write_jsonl(path, [t.to_dict() for t in tiles])


def read_tile_manifest(path):
    return [TileRef.from_dict(obj) for _, obj in read_jsonl(path)]
