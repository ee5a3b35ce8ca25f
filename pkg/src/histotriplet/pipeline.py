"""End-to-end orchestration: ingest -> sample -> train -> embed -> eval -> plot.

A single run configuration drives every stage; the global seed is the
root of each module's seed via derive_seed. Stages cache by content
hash: re-running a completed stage with unchanged inputs is a no-op, and
the run manifest records a hash for every produced file.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus.labeled import DatasetSplit, load_labeled_patches, split_source_target
from .corpus.records import index_slides, read_tile_manifest, write_tile_manifest
from .corpus.stores import ImageDirectoryStore
from .corpus.tiling import filter_tissue_tiles, grid_tile_slide
from .embeddings import load_embeddings, save_embeddings
from .errors import ConfigError, ContractError, PipelineError
from .manifests import read_jsonl, sha256_file, sha256_text
from .model import EncoderConfig, TripletLossConfig, extract_embeddings
from .projection import (
    ProjectionConfig,
    project_2d,
    render_scatter,
    write_projection_metadata,
)
from .sampler import (
    DistantType,
    SamplerConfig,
    SPATIAL_TYPES,
    TileCorpus,
    generate_manifest,
    read_triplet_manifest,
    write_triplet_manifest,
)
from .trainer import (
    LabeledPatchSource,
    TilePatchSource,
    TrainConfig,
    load_checkpoint,
    train_supervised,
    train_triplet,
)
from .transfer import PortionSpec, SvmGrid, build_report, write_report

STAGES = ("ingest", "sample", "train", "embed", "eval", "plot")

PAPER_TRIPLET_TOTAL = 22_528


def derive_seed(global_seed, module_name):
    """module_seed = low 63 bits of SHA-256("{global_seed}:{module_name}").

    A pure, documented function so artifacts stay reproducible across
    tool versions.
    """
    digest = hashlib.sha256(f"{global_seed}:{module_name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class CorpusSettings:
    slides_manifest: str | None = None
    labeled_root: str | None = None
    class_names: tuple | None = None  # None: inferred from directories
    patch_size: int = 128
    magnification: float = 20.0
    stride: int = 128
    tissue_min_saturation: float | None = 0.05
    crop: str = "center"
    split_fractions: tuple = (0.6, 0.4)


@dataclass
class SamplerSettings:
    neighbor_max_dist: float = 512.0
    distant_min_dist: float = 2048.0
    counts_per_type: dict | None = None  # None: paper-scale defaults
    max_rejections: int = 1000

    def resolve_counts(self, labeled: bool):
        if self.counts_per_type:
            return {DistantType(k): int(v) for k, v in self.counts_per_type.items()}
        if labeled:
            return {DistantType.DIFFERENT_CLASS_LABEL: PAPER_TRIPLET_TOTAL}
        per_type = PAPER_TRIPLET_TOTAL // len(SPATIAL_TYPES)
        return {t: per_type for t in SPATIAL_TYPES}


@dataclass
class EncoderSettings:
    architecture: str = "resnet18"
    embedding_dim: int = 128
    normalize_embeddings: bool = False


@dataclass
class LossSettings:
    margin: float = 0.25
    reduction: str = "sum"


@dataclass
class TrainSettings:
    mode: str = "triplet"
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 50
    augmentation: str = "none"
    checkpoint_every: int = 0


@dataclass
class EvalSettings:
    portions: tuple = (0.05, 0.10, 0.25, 0.50, 1.00)
    folds: int = 10
    inner_folds: int = 3
    cv_scope: str = "within_portion"
    kernels: tuple = ("linear", "rbf", "sigmoid", "poly")
    c_values: tuple = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
    gamma_values: tuple = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, "scale", "auto")


@dataclass
class ProjectionSettings:
    n_neighbors: int = 40
    min_dist: float = 0.1
    n_epochs: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/output"
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    projection: ProjectionSettings = field(default_factory=ProjectionSettings)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self), default=str))


_SECTION_TYPES = {
    "corpus": CorpusSettings,
    "sampler": SamplerSettings,
    "encoder": EncoderSettings,
    "loss": LossSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
    "projection": ProjectionSettings,
}


def _coerce(value, default):
    """Coerce parsed YAML scalars/lists toward the default's type."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError("expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or int(value) != value:
            raise ValueError("expected an integer")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError("expected a list")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValueError("expected a mapping")
        return dict(value)
    if isinstance(default, str):
        return str(value)
    return value


def parse_config(data):
    """Build a RunConfig from a parsed mapping, reporting every violation.

    Returns (config or None, [(path, message), ...]). Unknown keys are
    violations too: a typo should never silently fall back to a default.
    """
    errors = []
    data = data or {}
    if not isinstance(data, dict):
        return None, [("", "configuration root must be a mapping")]

    config = RunConfig()
    known_top = {"seed", "output_dir", *_SECTION_TYPES}
    for key in data:
        if key not in known_top:
            errors.append((key, "unknown configuration key"))

    if "seed" in data:
        try:
            config.seed = _coerce(data["seed"], 0)
        except (ValueError, TypeError) as exc:
            errors.append(("seed", str(exc)))
    if "output_dir" in data:
        try:
            config.output_dir = _coerce(data["output_dir"], "")
        except (ValueError, TypeError) as exc:
            errors.append(("output_dir", str(exc)))

    for section, cls in _SECTION_TYPES.items():
        payload = data.get(section)
        if payload is None:
            continue
        if not isinstance(payload, dict):
            errors.append((section, "expected a mapping"))
            continue
        target = getattr(config, section)
        defaults = cls()
        for key, value in payload.items():
            if not hasattr(defaults, key):
                errors.append((f"{section}.{key}", "unknown configuration key"))
                continue
            try:
                setattr(target, key, _coerce(value, getattr(defaults, key)))
            except (ValueError, TypeError) as exc:
                errors.append((f"{section}.{key}", str(exc)))

    errors.extend(_validate_invariants(config))
    return (None, errors) if errors else (config, [])


def _validate_invariants(config: RunConfig):
    errors = []

    def check(cond, path, msg):
        if not cond:
            errors.append((path, msg))

    check(config.loss.margin >= 0, "loss.margin", "margin must be nonnegative")
    check(config.loss.reduction in ("sum", "mean"), "loss.reduction", "must be sum or mean")
    check(config.train.learning_rate >= 0, "train.learning_rate", "must be nonnegative")
    check(config.train.batch_size >= 1, "train.batch_size", "must be >= 1")
    check(config.train.epochs >= 0, "train.epochs", "must be >= 0")
    check(
        config.train.mode in ("triplet", "cross_entropy"),
        "train.mode",
        "must be triplet or cross_entropy",
    )
    check(
        config.train.augmentation in ("none", "random_crop_flip"),
        "train.augmentation",
        "must be none or random_crop_flip",
    )
    check(config.encoder.embedding_dim > 0, "encoder.embedding_dim", "must be positive")
    check(
        config.encoder.architecture in ("resnet18", "small_conv"),
        "encoder.architecture",
        "must be resnet18 or small_conv",
    )
    check(
        0 < config.sampler.neighbor_max_dist < config.sampler.distant_min_dist,
        "sampler.neighbor_max_dist",
        "require 0 < neighbor_max_dist < distant_min_dist",
    )
    check(config.sampler.max_rejections >= 1, "sampler.max_rejections", "must be >= 1")
    if config.sampler.counts_per_type:
        for key, value in config.sampler.counts_per_type.items():
            try:
                DistantType(key)
            except ValueError:
                errors.append((f"sampler.counts_per_type.{key}", "unknown distant type"))
                continue
            if not isinstance(value, int) or value < 0:
                errors.append((f"sampler.counts_per_type.{key}", "count must be >= 0"))
    names = config.corpus.class_names
    check(
        names is None or (isinstance(names, (list, tuple)) and len(names) > 0),
        "corpus.class_names",
        "must be a nonempty list or null",
    )
    check(config.corpus.patch_size > 0, "corpus.patch_size", "must be positive")
    check(config.corpus.stride > 0, "corpus.stride", "must be positive")
    check(config.corpus.magnification > 0, "corpus.magnification", "must be positive")
    check(config.corpus.crop in ("center", "random"), "corpus.crop", "must be center or random")
    fr = config.corpus.split_fractions
    check(
        len(fr) == 2 and abs(sum(fr) - 1.0) < 1e-9 and all(0 <= f <= 1 for f in fr),
        "corpus.split_fractions",
        "must be two fractions summing to 1",
    )
    check(config.eval.folds >= 2, "eval.folds", "must be >= 2")
    check(config.eval.inner_folds >= 2, "eval.inner_folds", "must be >= 2")
    check(
        config.eval.cv_scope in ("within_portion", "train_portion_test_rest"),
        "eval.cv_scope",
        "must be within_portion or train_portion_test_rest",
    )
    portions = config.eval.portions
    check(
        len(set(portions)) == len(portions) and all(0 < p <= 1 for p in portions),
        "eval.portions",
        "fractions must be unique and in (0, 1]",
    )
    check(config.projection.n_neighbors >= 2, "projection.n_neighbors", "must be >= 2")
    check(config.projection.min_dist >= 0, "projection.min_dist", "must be >= 0")
    return errors


def validate_config(path) -> RunConfig:
    """Load + normalize a YAML run configuration.

    An empty file yields the fully defaulted configuration (margin 0.25,
    lr 1e-5, batch 32, dim 128, n_neighbors 40). All violations are
    raised together in one ConfigError.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([(str(path), f"cannot read: {exc}")]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([(str(path), f"not valid YAML: {exc}")]) from exc
    config, errors = parse_config(data)
    if errors:
        raise ConfigError(errors)
    return config


@dataclass
class StageResult:
    stage: str
    inputs_hash: str
    files: dict  # relative path -> sha256
    skipped: bool = False


class _Lock:
    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


class Pipeline:
    """Executes stages in dependency order against one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        out = os.environ.get("HISTOTRIPLET_OUTPUT_DIR")
        self.output_dir = Path(out) if out else Path(config.output_dir)
        workers = os.environ.get("HISTOTRIPLET_WORKERS")
        if workers:
            import torch

            torch.set_num_threads(max(1, int(workers)))
        self._labeled = None
        self._labeled_fingerprint = None
        self._slide_records = None
        self.model_tag = f"{config.train.mode}:{config.encoder.architecture}"

    # -- paths ---------------------------------------------------------
    def path(self, name) -> Path:
        return self.output_dir / name

    def manifest_path(self) -> Path:
        return self.path("run_manifest.json")

    # -- shared inputs ---------------------------------------------------
    def labeled_dataset(self):
        if self._labeled is None:
            if not self.config.corpus.labeled_root:
                raise PipelineError("corpus.labeled_root is not configured")
            rng = np.random.default_rng(derive_seed(self.config.seed, "corpus"))
            names = self.config.corpus.class_names
            self._labeled, _ = load_labeled_patches(
                self.config.corpus.labeled_root,
                crop=self.config.corpus.crop,
                patch_size=self.config.corpus.patch_size,
                class_names=tuple(names) if names else None,
                rng=rng,
            )
        return self._labeled

    def labeled_fingerprint(self):
        if self._labeled_fingerprint is None:
            root = Path(self.config.corpus.labeled_root)
            parts = []
            for p in sorted(root.rglob("*")):
                if p.is_file():
                    parts.append(f"{p.relative_to(root)}:{sha256_file(p)}")
            self._labeled_fingerprint = sha256_text("\n".join(parts))
        return self._labeled_fingerprint

    def slide_records(self):
        if self._slide_records is None:
            if not self.config.corpus.slides_manifest:
                raise PipelineError("corpus.slides_manifest is not configured")
            self._slide_records = index_slides(self.config.corpus.slides_manifest)
        return self._slide_records

    def spatial(self) -> bool:
        return bool(self.config.corpus.slides_manifest)

    def has_labeled(self) -> bool:
        return bool(self.config.corpus.labeled_root)

    def default_stages(self):
        stages = ["ingest", "sample", "train"]
        if self.has_labeled():
            stages += ["embed", "eval", "plot"]
        return stages

    # -- stage input hashes ----------------------------------------------
    def _hash_inputs(self, parts):
        return sha256_text(json.dumps(parts, sort_keys=True, default=str))

    def _stage_inputs(self, stage):
        cfg = self.config
        if stage == "ingest":
            parts = {"corpus": asdict(cfg.corpus), "seed": cfg.seed}
            if self.spatial():
                parts["slides_manifest"] = sha256_file(cfg.corpus.slides_manifest)
            if self.has_labeled():
                parts["labeled_root"] = self.labeled_fingerprint()
            return parts
        if stage == "sample":
            parts = {"sampler": asdict(cfg.sampler), "seed": cfg.seed}
            if self.spatial():
                parts["tiles"] = sha256_file(self.path("tiles.manifest"))
                parts["slides_manifest"] = sha256_file(cfg.corpus.slides_manifest)
            else:
                parts["split"] = sha256_file(self.path("split.json"))
                parts["labeled_root"] = self.labeled_fingerprint()
            return parts
        if stage == "train":
            parts = {
                "train": asdict(cfg.train),
                "encoder": asdict(cfg.encoder),
                "loss": asdict(cfg.loss),
                "seed": cfg.seed,
            }
            if cfg.train.mode == "triplet":
                parts["triplets"] = sha256_file(self.path("triplets.manifest"))
            if self.spatial():
                parts["slides_manifest"] = sha256_file(cfg.corpus.slides_manifest)
            if self.has_labeled():
                parts["labeled_root"] = self.labeled_fingerprint()
                parts["split"] = sha256_file(self.path("split.json"))
            return parts
        if stage == "embed":
            return {
                "encoder": asdict(cfg.encoder),
                "checkpoint": sha256_file(self.path("checkpoint_final.ckpt")),
                "split": sha256_file(self.path("split.json")),
                "labeled_root": self.labeled_fingerprint(),
            }
        if stage == "eval":
            return {
                "eval": asdict(cfg.eval),
                "seed": cfg.seed,
                "embeddings": sha256_file(self.path("embeddings.bin")),
            }
        if stage == "plot":
            return {
                "projection": asdict(cfg.projection),
                "seed": cfg.seed,
                "embeddings": sha256_file(self.path("embeddings.bin")),
            }
        raise PipelineError(f"unknown stage {stage!r}")

    # -- stage bodies ------------------------------------------------------
    def _run_ingest(self):
        files = []
        if self.spatial():
            records = self.slide_records()
            store = ImageDirectoryStore(records)
            tiles = []
            for rec in records:
                slide_tiles = grid_tile_slide(
                    rec,
                    patch_size=self.config.corpus.patch_size,
                    magnification=self.config.corpus.magnification,
                    stride=self.config.corpus.stride,
                )
                tiles.extend(
                    filter_tissue_tiles(
                        slide_tiles, store, self.config.corpus.tissue_min_saturation
                    )
                )
            write_tile_manifest(self.path("tiles.manifest"), tiles)
            files.append("tiles.manifest")
        if self.has_labeled():
            dataset = self.labeled_dataset()
            split = split_source_target(
                dataset,
                tuple(self.config.corpus.split_fractions),
                seed=derive_seed(self.config.seed, "corpus"),
            )
            split.write(self.path("split.json"))
            files.append("split.json")
        if not files:
            raise PipelineError(
                "ingest needs corpus.slides_manifest or corpus.labeled_root"
            )
        return files

    def _load_split(self) -> DatasetSplit:
        (_, obj), = read_jsonl(self.path("split.json"))
        return DatasetSplit(
            source_ids=obj["source_ids"],
            target_ids=obj["target_ids"],
            fractions=tuple(obj["fractions"]),
            seed=obj["seed"],
        )

    def _run_sample(self):
        scfg = self.config.sampler
        if self.spatial():
            records = self.slide_records()
            tiles = read_tile_manifest(self.path("tiles.manifest"))
            by_slide = {}
            for t in tiles:
                by_slide.setdefault(t.slide_id, []).append(t)
            corpus = TileCorpus(
                slides={r.slide_id: r for r in records}, tiles=by_slide
            )
            counts = scfg.resolve_counts(labeled=False)
            source = corpus
        else:
            dataset = self.labeled_dataset()
            split = self._load_split()
            source = dataset.subset_by_ids(split.source_ids, ":source")
            counts = scfg.resolve_counts(labeled=True)
        sampler_config = SamplerConfig(
            neighbor_max_dist=scfg.neighbor_max_dist,
            distant_min_dist=scfg.distant_min_dist,
            seed=derive_seed(self.config.seed, "sampler"),
            counts_per_type=counts,
            max_rejections=scfg.max_rejections,
        )
        triplets = generate_manifest(source, sampler_config)
        write_triplet_manifest(self.path("triplets.manifest"), triplets)
        return ["triplets.manifest"]

    def _run_train(self):
        cfg = self.config
        train_config = TrainConfig(
            learning_rate=cfg.train.learning_rate,
            beta1=cfg.train.beta1,
            beta2=cfg.train.beta2,
            batch_size=cfg.train.batch_size,
            epochs=cfg.train.epochs,
            seed=derive_seed(cfg.seed, "trainer"),
            mode=cfg.train.mode,
            augmentation=cfg.train.augmentation,
            checkpoint_every=cfg.train.checkpoint_every,
        )
        encoder_config = EncoderConfig(
            input_shape=(cfg.corpus.patch_size, cfg.corpus.patch_size, 3),
            embedding_dim=cfg.encoder.embedding_dim,
            architecture=cfg.encoder.architecture,
            normalize_embeddings=cfg.encoder.normalize_embeddings,
        )
        if cfg.train.mode == "triplet":
            manifest = read_triplet_manifest(self.path("triplets.manifest"))
            if self.spatial():
                patch_source = TilePatchSource(ImageDirectoryStore(self.slide_records()))
            else:
                split = self._load_split()
                patch_source = LabeledPatchSource(
                    self.labeled_dataset().subset_by_ids(split.source_ids, ":source")
                )
            loss_config = TripletLossConfig(
                margin=cfg.loss.margin, reduction=cfg.loss.reduction
            )
            _, log = train_triplet(
                manifest,
                patch_source,
                train_config,
                encoder_config,
                loss_config,
                checkpoint_dir=self.output_dir,
            )
        else:
            split = self._load_split()
            dataset = self.labeled_dataset().subset_by_ids(split.source_ids, ":source")
            _, log = train_supervised(
                dataset, train_config, encoder_config, checkpoint_dir=self.output_dir
            )
        log.write(self.path("train_log.jsonl"))
        files = ["train_log.jsonl", "checkpoint_final.ckpt", "checkpoint_final.ckpt.json"]
        for extra in sorted(self.output_dir.glob("checkpoint_epoch*.ckpt*")):
            files.append(extra.name)
        return files

    def _run_embed(self):
        model, _ = load_checkpoint(self.path("checkpoint_final.ckpt"))
        encoder = model.encoder if hasattr(model, "encoder") else model
        split = self._load_split()
        target = self.labeled_dataset().subset_by_ids(split.target_ids, ":target")
        matrix = extract_embeddings(target, encoder, batch_size=self.config.train.batch_size)
        save_embeddings(self.path("embeddings.bin"), matrix)
        return ["embeddings.bin", "embeddings.bin.labels"]

    def _run_eval(self):
        cfg = self.config.eval
        matrix = load_embeddings(self.path("embeddings.bin"))
        report = build_report(
            {self.model_tag: matrix},
            PortionSpec(
                fractions=tuple(cfg.portions),
                seed=derive_seed(self.config.seed, "transfer"),
            ),
            SvmGrid(
                kernels=tuple(cfg.kernels),
                c_values=tuple(cfg.c_values),
                gamma_values=tuple(cfg.gamma_values),
            ),
            k=cfg.folds,
            cv_scope=cfg.cv_scope,
            inner_k=cfg.inner_folds,
        )
        write_report(
            report,
            self.path("report.csv"),
            self.path("report.txt"),
            self.path("report_meta.json"),
        )
        return ["report.csv", "report.txt", "report_meta.json"]

    def _run_plot(self):
        cfg = self.config.projection
        matrix = load_embeddings(self.path("embeddings.bin"))
        projection_config = ProjectionConfig(
            n_neighbors=cfg.n_neighbors,
            seed=derive_seed(self.config.seed, "projector"),
            min_dist=cfg.min_dist,
            n_epochs=cfg.n_epochs,
        )
        coords = project_2d(matrix, projection_config)
        render_scatter(
            coords,
            matrix.labels,
            matrix.item_ids,
            self.path("projection.png"),
            title=self.model_tag,
        )
        write_projection_metadata(
            self.path("projection_meta.json"),
            projection_config,
            {"rows": len(matrix), "model": self.model_tag},
        )
        return ["projection.png", "projection.csv", "projection_meta.json"]

    _BODIES = {
        "ingest": _run_ingest,
        "sample": _run_sample,
        "train": _run_train,
        "embed": _run_embed,
        "eval": _run_eval,
        "plot": _run_plot,
    }

    _UPSTREAM = {
        "ingest": (),
        "sample": ("ingest",),
        "train": ("ingest", "sample"),
        "embed": ("ingest", "train"),
        "eval": ("ingest", "train", "embed"),
        "plot": ("ingest", "train", "embed"),
    }

    # -- orchestration -----------------------------------------------------
    def _load_manifest(self):
        if self.manifest_path().exists():
            return json.loads(self.manifest_path().read_text(encoding="utf-8"))
        return {
            "tool_version": __version__,
            "config": self.config.to_dict(),
            "created_at": None,
            "updated_at": None,
            "artifacts": [],
        }

    def _entry_for(self, manifest, stage):
        for entry in manifest["artifacts"]:
            if entry["stage"] == stage:
                return entry
        return None

    def _entry_is_current(self, entry, inputs_hash):
        if entry is None or entry["inputs_hash"] != inputs_hash:
            return False
        for rel, digest in entry["files"].items():
            p = self.path(rel)
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def _check_upstream(self, manifest, stage, requested):
        for dep in self._UPSTREAM[stage]:
            if dep in requested:
                continue
            entry = self._entry_for(manifest, dep)
            if entry is None:
                raise PipelineError(
                    f"stage {stage!r} needs artifacts from {dep!r}, which has not run"
                )
            for rel, digest in entry["files"].items():
                p = self.path(rel)
                if not p.exists():
                    raise PipelineError(
                        f"stage {stage!r}: missing upstream artifact {rel} from {dep!r}"
                    )
                if sha256_file(p) != digest:
                    raise PipelineError(
                        f"stage {stage!r}: upstream artifact {rel} is stale "
                        f"(hash differs from the run manifest)"
                    )

    def run(self, stages=None):
        requested = list(stages) if stages else self.default_stages()
        unknown = [s for s in requested if s not in STAGES]
        if unknown:
            raise PipelineError(f"unknown stages: {unknown}")
        requested = [s for s in STAGES if s in requested]

        self.output_dir.mkdir(parents=True, exist_ok=True)
        with _Lock(self.output_dir):
            manifest = self._load_manifest()
            now = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
            if manifest["created_at"] is None:
                manifest["created_at"] = now
            results = []
            for stage in requested:
                self._check_upstream(manifest, stage, requested)
                inputs_hash = self._hash_inputs(self._stage_inputs(stage))
                entry = self._entry_for(manifest, stage)
                if self._entry_is_current(entry, inputs_hash):
                    results.append(
                        StageResult(stage, inputs_hash, dict(entry["files"]), skipped=True)
                    )
                    continue
                files = self._BODIES[stage](self)
                file_hashes = {rel: sha256_file(self.path(rel)) for rel in files}
                new_entry = {
                    "stage": stage,
                    "inputs_hash": inputs_hash,
                    "files": file_hashes,
                }
                if entry is None:
                    manifest["artifacts"].append(new_entry)
                else:
                    entry.update(new_entry)
                results.append(StageResult(stage, inputs_hash, file_hashes))
                manifest["updated_at"] = now
                manifest["config"] = self.config.to_dict()
                self._write_manifest(manifest)
            manifest["updated_at"] = now
            self._write_manifest(manifest)
        return manifest

    def _write_manifest(self, manifest):
        self.manifest_path().write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
        )


def run_pipeline(config: RunConfig, stages=None):
    """Run the requested pipeline stages; returns the run manifest dict."""
    return Pipeline(config).run(stages)
