"""Anchor/neighbor/distant triplet generation.

Similarity is defined without pixel labels: a neighbor is a tile whose
center lies close to the anchor's center on the same slide, while the
distant tile is drawn by one of four strategies of increasing remoteness
(same slide but far away; another slide of the same cancer subtype;
another subtype of the same organ; another organ). Labeled patch sets use
the class rule instead: neighbor shares the anchor's tissue class,
distant does not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus.labeled import LabeledPatchSet
from .corpus.records import SlideRecord, TileRef, UNLABELED
from .errors import ContractError, SamplerExhaustionError
from .manifests import read_jsonl, write_jsonl


class DistantType(Enum):
    SAME_SLIDE_REMOTE = "same_slide_remote"
    SAME_SUBTYPE_OTHER_SLIDE = "same_subtype_other_slide"
    SAME_ORGAN_OTHER_SUBTYPE = "same_organ_other_subtype"
    OTHER_ORGAN = "other_organ"
    DIFFERENT_CLASS_LABEL = "different_class_label"


SPATIAL_TYPES = (
    DistantType.SAME_SLIDE_REMOTE,
    DistantType.SAME_SUBTYPE_OTHER_SLIDE,
    DistantType.SAME_ORGAN_OTHER_SUBTYPE,
    DistantType.OTHER_ORGAN,
)


@dataclass(frozen=True)
class Triplet:
    """References are TileRefs (spatial rule) or item-id strings (class rule)."""

    anchor: object
    neighbor: object
    distant: object
    distant_type: DistantType

    def to_dict(self):
        def ref(r):
            return r.to_dict() if isinstance(r, TileRef) else {"item_id": r}

        return {
            "anchor": ref(self.anchor),
            "neighbor": ref(self.neighbor),
            "distant": ref(self.distant),
            "distant_type": self.distant_type.value,
        }

    @classmethod
    def from_dict(cls, d):
        def unref(r):
            if "item_id" in r:
                return r["item_id"]
            return TileRef.from_dict(r)

        return cls(
            anchor=unref(d["anchor"]),
            neighbor=unref(d["neighbor"]),
            distant=unref(d["distant"]),
            distant_type=DistantType(d["distant_type"]),
        )


@dataclass
class SamplerConfig:
    """Radii are Euclidean distances between tile centers in base-level pixels."""

    neighbor_max_dist: float = 512.0
    distant_min_dist: float = 2048.0
    seed: int = 0
    counts_per_type: dict = field(default_factory=dict)
    max_rejections: int = 1000

    def __post_init__(self):
        if not 0 < self.neighbor_max_dist < self.distant_min_dist:
            raise ContractError(
                "require 0 < neighbor_max_dist < distant_min_dist, got "
                f"{self.neighbor_max_dist} / {self.distant_min_dist}"
            )
        if self.max_rejections < 1:
            raise ContractError("max_rejections must be >= 1")
        cleaned = {}
        for key, count in self.counts_per_type.items():
            dtype = key if isinstance(key, DistantType) else DistantType(key)
            if count < 0:
                raise ContractError(f"negative count for {dtype.value}")
            cleaned[dtype] = int(count)
        self.counts_per_type = cleaned


@dataclass
class TileCorpus:
    """Slides plus their (tissue-passing) tiles, indexed for sampling."""

    slides: dict  # slide_id -> SlideRecord
    tiles: dict  # slide_id -> list[TileRef]

    def __post_init__(self):
        missing = set(self.tiles) - set(self.slides)
        if missing:
            raise ContractError(f"tiles reference unknown slides: {sorted(missing)}")
        self.tiles = {sid: list(ts) for sid, ts in self.tiles.items()}

    def slide_ids_with_tiles(self):
        return sorted(sid for sid, ts in self.tiles.items() if ts)

    def record(self, slide_id) -> SlideRecord:
        return self.slides[slide_id]


def center_distance(a: TileRef, b: TileRef) -> float:
    return math.hypot(a.center_x - b.center_x, a.center_y - b.center_y)


def draw_anchor(corpus: TileCorpus, rng) -> TileRef:
    """Uniform over slides, then uniform over that slide's tiles.

    Stratifying by slide first keeps large slides from dominating the
    anchor distribution.
    """
    slide_ids = corpus.slide_ids_with_tiles()
    if not slide_ids:
        raise SamplerExhaustionError("anchor", 0, "corpus has no tiles")
    sid = slide_ids[int(rng.integers(len(slide_ids)))]
    tiles = corpus.tiles[sid]
    return tiles[int(rng.integers(len(tiles)))]


def _draw_neighbor(anchor, corpus, config, rng):
    tiles = corpus.tiles[anchor.slide_id]
    for _ in range(config.max_rejections):
        cand = tiles[int(rng.integers(len(tiles)))]
        if cand == anchor:
            continue
        if center_distance(anchor, cand) <= config.neighbor_max_dist:
            return cand
    raise SamplerExhaustionError(
        "neighbor", config.max_rejections, f"slide {anchor.slide_id}"
    )


def _eligible_distant_slides(anchor, corpus, dtype):
    anchor_rec = corpus.record(anchor.slide_id)
    out = []
    for sid in corpus.slide_ids_with_tiles():
        if sid == anchor.slide_id:
            continue
        rec = corpus.record(sid)
        if dtype is DistantType.SAME_SUBTYPE_OTHER_SLIDE:
            ok = (
                anchor_rec.subtype != UNLABELED
                and rec.subtype == anchor_rec.subtype
            )
        elif dtype is DistantType.SAME_ORGAN_OTHER_SUBTYPE:
            ok = (
                rec.organ_site == anchor_rec.organ_site
                and anchor_rec.subtype != UNLABELED
                and rec.subtype != UNLABELED
                and rec.subtype != anchor_rec.subtype
            )
        elif dtype is DistantType.OTHER_ORGAN:
            ok = rec.organ_site != anchor_rec.organ_site
        else:
            raise ContractError(f"not a cross-slide type: {dtype}")
        if ok:
            out.append(sid)
    return out


def _draw_distant(anchor, corpus, dtype, config, rng):
    if dtype is DistantType.SAME_SLIDE_REMOTE:
        tiles = corpus.tiles[anchor.slide_id]
        for _ in range(config.max_rejections):
            cand = tiles[int(rng.integers(len(tiles)))]
            if cand == anchor:
                continue
            if center_distance(anchor, cand) >= config.distant_min_dist:
                return cand
        raise SamplerExhaustionError(dtype.value, config.max_rejections)

    eligible = _eligible_distant_slides(anchor, corpus, dtype)
    if not eligible:
        raise SamplerExhaustionError(dtype.value, 0, "no eligible slide")
    sid = eligible[int(rng.integers(len(eligible)))]
    tiles = corpus.tiles[sid]
    return tiles[int(rng.integers(len(tiles)))]


def sample_spatial_triplet(anchor, corpus, dtype, config, rng) -> Triplet:
    """Draw a neighbor within neighbor_max_dist and a distant tile
    satisfying `dtype`, both by uniform rejection sampling."""
    if dtype not in SPATIAL_TYPES:
        raise ContractError(f"{dtype} is not a spatial distant type")
    if anchor.slide_id not in corpus.slides:
        raise KeyError(f"anchor slide {anchor.slide_id!r} not in corpus")
    neighbor = _draw_neighbor(anchor, corpus, config, rng)
    distant = _draw_distant(anchor, corpus, dtype, config, rng)
    return Triplet(anchor=anchor, neighbor=neighbor, distant=distant, distant_type=dtype)


def sample_labeled_triplet(anchor_id, dataset: LabeledPatchSet, rng) -> Triplet:
    """Neighbor shares the anchor's class; distant is any item of another class."""
    anchor_label = dataset.label_for(anchor_id)
    same = [i for i, l in zip(dataset.item_ids, dataset.labels) if l == anchor_label and i != anchor_id]
    other = [i for i, l in zip(dataset.item_ids, dataset.labels) if l != anchor_label]
    if not same:
        raise SamplerExhaustionError(
            DistantType.DIFFERENT_CLASS_LABEL.value, 0, f"class {anchor_label} is a singleton"
        )
    if not other:
        raise SamplerExhaustionError(
            DistantType.DIFFERENT_CLASS_LABEL.value, 0, "only one class present"
        )
    neighbor = same[int(rng.integers(len(same)))]
    distant = other[int(rng.integers(len(other)))]
    return Triplet(
        anchor=anchor_id,
        neighbor=neighbor,
        distant=distant,
        distant_type=DistantType.DIFFERENT_CLASS_LABEL,
    )


def _type_rng(seed, dtype):
    index = list(DistantType).index(dtype)
    return np.random.default_rng(np.random.SeedSequence([int(seed), index]))


def generate_manifest(source, config: SamplerConfig):
    """Generate sum(counts_per_type) triplets, deterministically per seed.

    Each distant type draws from its own seed-derived RNG stream, so the
    manifest is a pure function of (source, config) regardless of how
    types are scheduled. `source` is a TileCorpus (spatial rule) or a
    LabeledPatchSet (class rule).
    """
    if not config.counts_per_type:
        raise ContractError("counts_per_type is empty")
    labeled = isinstance(source, LabeledPatchSet)
    triplets = []
    for dtype in DistantType:
        count = config.counts_per_type.get(dtype, 0)
        if count == 0:
            continue
        if labeled != (dtype is DistantType.DIFFERENT_CLASS_LABEL):
            raise ContractError(
                f"{dtype.value} does not apply to a "
                f"{'labeled set' if labeled else 'slide corpus'}"
            )
        rng = _type_rng(config.seed, dtype)
        for k in range(count):
            triplets.append(_generate_one(source, dtype, config, rng, k, labeled))
    return triplets


def _generate_one(source, dtype, config, rng, index, labeled):
    last_exhaustion = None
    for _ in range(config.max_rejections):
        try:
            if labeled:
                anchor_id = source.item_ids[int(rng.integers(len(source.item_ids)))]
                return sample_labeled_triplet(anchor_id, source, rng)
            anchor = draw_anchor(source, rng)
            return sample_spatial_triplet(anchor, source, dtype, config, rng)
        except SamplerExhaustionError as exc:
            last_exhaustion = exc
    raise SamplerExhaustionError(
        dtype.value,
        config.max_rejections,
        f"gave up at triplet {index} of type {dtype.value}: {last_exhaustion}",
    )


def validate_triplet(triplet: Triplet, slides=None, item_labels=None, config=None):
    """Independently re-check the neighbor rule and the distant-type rule.

    Works from raw coordinates and metadata rather than trusting the
    sampler. Returns (ok, violation description or None). Dangling
    references raise KeyError.
    """
    dtype = triplet.distant_type
    if dtype is DistantType.DIFFERENT_CLASS_LABEL:
        if item_labels is None:
            raise ContractError("labeled triplet requires item_labels metadata")
        for ref in (triplet.anchor, triplet.neighbor, triplet.distant):
            if ref not in item_labels:
                raise KeyError(f"unknown item id {ref!r}")
        if triplet.anchor == triplet.neighbor:
            return False, "anchor and neighbor are the same item"
        if item_labels[triplet.neighbor] != item_labels[triplet.anchor]:
            return False, "neighbor class differs from anchor class"
        if item_labels[triplet.distant] == item_labels[triplet.anchor]:
            return False, "distant shares the anchor class"
        return True, None

    if slides is None:
        raise ContractError("spatial triplet requires slide metadata")
    if config is None:
        raise ContractError("spatial triplet requires a SamplerConfig")
    a, n, d = triplet.anchor, triplet.neighbor, triplet.distant
    for ref in (a, n, d):
        if not isinstance(ref, TileRef):
            return False, "spatial triplet with non-tile reference"
        if ref.slide_id not in slides:
            raise KeyError(f"unknown slide {ref.slide_id!r}")

    if n == a:
        return False, "anchor and neighbor are the same tile"
    if n.slide_id != a.slide_id:
        return False, "neighbor on a different slide"
    if center_distance(a, n) > config.neighbor_max_dist:
        return False, "neighbor beyond neighbor_max_dist"

    a_rec, d_rec = slides[a.slide_id], slides[d.slide_id]
    if dtype is DistantType.SAME_SLIDE_REMOTE:
        if d.slide_id != a.slide_id:
            return False, "type-1 distant not on the anchor slide"
        if center_distance(a, d) < config.distant_min_dist:
            return False, "type-1 distant closer than distant_min_dist"
    elif dtype is DistantType.SAME_SUBTYPE_OTHER_SLIDE:
        if d.slide_id == a.slide_id:
            return False, "type-2 distant on the same slide"
        if a_rec.subtype == UNLABELED or d_rec.subtype != a_rec.subtype:
            return False, "type-2 distant subtype differs or is unlabeled"
    elif dtype is DistantType.SAME_ORGAN_OTHER_SUBTYPE:
        if d_rec.organ_site != a_rec.organ_site:
            return False, "type-3 distant organ differs"
        if (
            a_rec.subtype == UNLABELED
            or d_rec.subtype == UNLABELED
            or d_rec.subtype == a_rec.subtype
        ):
            return False, "type-3 distant subtype not a different known subtype"
    elif dtype is DistantType.OTHER_ORGAN:
        if d_rec.organ_site == a_rec.organ_site:
            return False, "type-4 distant shares the anchor organ"
    else:
        return False, f"unknown distant type {dtype}"
    return True, None


def write_triplet_manifest(path, triplets):
    return write_jsonl(path, [t.to_dict() for t in triplets])


def read_triplet_manifest(path):
    return [Triplet.from_dict(obj) for _, obj in read_jsonl(path)]
