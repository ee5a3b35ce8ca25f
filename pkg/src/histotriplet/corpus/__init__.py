from .records import (
    ORGAN_SITES,
    SUBTYPE_TO_ORGAN,
    UNLABELED,
    SlideRecord,
    TileRef,
    index_slides,
    read_tile_manifest,
    write_tile_manifest,
)
from .stores import ArraySlideStore, ImageDirectoryStore, SlideStore, gradient_slide
from .tiling import (
    filter_tissue_tiles,
    grid_tile_slide,
    materialize_patch,
    mean_saturation,
)
from .labeled import (
    TISSUE_CLASSES,
    DatasetSplit,
    LabeledPatchSet,
    LoadReport,
    center_crop,
    load_labeled_patches,
    random_crop,
    split_source_target,
)

__all__ = [
    "ORGAN_SITES",
    "SUBTYPE_TO_ORGAN",
    "UNLABELED",
    "SlideRecord",
    "TileRef",
    "index_slides",
    "read_tile_manifest",
    "write_tile_manifest",
    "SlideStore",
    "ArraySlideStore",
    "ImageDirectoryStore",
    "gradient_slide",
    "grid_tile_slide",
    "materialize_patch",
    "mean_saturation",
    "filter_tissue_tiles",
    "TISSUE_CLASSES",
    "LabeledPatchSet",
    "LoadReport",
    "DatasetSplit",
    "center_crop",
    "random_crop",
    "load_labeled_patches",
    "split_source_target",
]
