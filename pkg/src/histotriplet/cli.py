"""Command-line interface.

Subcommands mirror the pipeline stages (ingest, sample, train, embed,
eval, plot) plus `run` for the orchestrated pipeline and `validate` for
configuration checking. Standalone subcommands read the same YAML run
configuration where they need corpus or model settings.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus.records import index_slides, write_tile_manifest
from .corpus.stores import ImageDirectoryStore
from .corpus.tiling import filter_tissue_tiles, grid_tile_slide
from .embeddings import load_embeddings, save_embeddings
from .errors import ConfigError, HistotripletError
from .model import extract_embeddings
from .pipeline import (
    Pipeline,
    RunConfig,
    derive_seed,
    run_pipeline,
    validate_config,
)
from .projection import ProjectionConfig, project_2d, render_scatter, write_projection_metadata
from .sampler import DistantType
from .trainer import load_checkpoint
from .transfer import PortionSpec, SvmGrid, build_report, write_report


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return validate_config(path)


def cmd_ingest(args):
    records = index_slides(args.manifest)
    store = ImageDirectoryStore(records)
    min_saturation = None if args.no_tissue_filter else args.min_saturation
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tiles = []
    for rec in records:
        slide_tiles = grid_tile_slide(
            rec,
            patch_size=args.patch_size,
            magnification=args.magnification,
            stride=args.stride,
        )
        kept = filter_tissue_tiles(slide_tiles, store, min_saturation)
        tiles.extend(kept)
        print(f"{rec.slide_id}: {len(kept)}/{len(slide_tiles)} tiles kept")
    path = write_tile_manifest(out_dir / "tiles.manifest", tiles)
    print(f"wrote {len(tiles)} tiles to {path}")
    return 0


def cmd_sample(args):
    config = _load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.count is not None and args.type is None and not config.corpus.slides_manifest:
        config.sampler.counts_per_type = {
            DistantType.DIFFERENT_CLASS_LABEL.value: args.count
        }
    if args.type is not None:
        count = args.count if args.count is not None else 1000
        config.sampler.counts_per_type = {args.type: count}

    pipe = Pipeline(config)
    from .sampler import SamplerConfig, TileCorpus, generate_manifest, write_triplet_manifest

    scfg = config.sampler
    if pipe.spatial():
        records = pipe.slide_records()
        store = ImageDirectoryStore(records)
        by_slide = {}
        for rec in records:
            tiles = grid_tile_slide(
                rec,
                patch_size=config.corpus.patch_size,
                magnification=config.corpus.magnification,
                stride=config.corpus.stride,
            )
            by_slide[rec.slide_id] = filter_tissue_tiles(
                tiles, store, config.corpus.tissue_min_saturation
            )
        source = TileCorpus(slides={r.slide_id: r for r in records}, tiles=by_slide)
        counts = scfg.resolve_counts(labeled=False)
    else:
        from .corpus.labeled import split_source_target

        dataset = pipe.labeled_dataset()
        split = split_source_target(
            dataset,
            tuple(config.corpus.split_fractions),
            seed=derive_seed(config.seed, "corpus"),
        )
        source = dataset.subset_by_ids(split.source_ids, ":source")
        counts = scfg.resolve_counts(labeled=True)

    seed = args.seed if args.seed is not None else derive_seed(config.seed, "sampler")
    sampler_config = SamplerConfig(
        neighbor_max_dist=scfg.neighbor_max_dist,
        distant_min_dist=scfg.distant_min_dist,
        seed=seed,
        counts_per_type=counts,
        max_rejections=scfg.max_rejections,
    )
    triplets = generate_manifest(source, sampler_config)
    path = write_triplet_manifest(args.out, triplets)
    print(f"wrote {len(triplets)} triplets to {path}")
    return 0


def cmd_train(args):
    config = _load_config(args.config)
    config.train.mode = {"triplet": "triplet", "xent": "cross_entropy"}[args.mode]
    config.output_dir = args.out
    pipe = Pipeline(config)
    pipe.output_dir.mkdir(parents=True, exist_ok=True)

    from .model import EncoderConfig, TripletLossConfig
    from .sampler import read_triplet_manifest
    from .trainer import (
        LabeledPatchSource,
        TilePatchSource,
        TrainConfig,
        train_supervised,
        train_triplet,
    )

    train_config = TrainConfig(
        learning_rate=config.train.learning_rate,
        beta1=config.train.beta1,
        beta2=config.train.beta2,
        batch_size=config.train.batch_size,
        epochs=config.train.epochs,
        seed=derive_seed(config.seed, "trainer"),
        mode=config.train.mode,
        augmentation=config.train.augmentation,
        checkpoint_every=config.train.checkpoint_every,
    )
    encoder_config = EncoderConfig(
        input_shape=(config.corpus.patch_size, config.corpus.patch_size, 3),
        embedding_dim=config.encoder.embedding_dim,
        architecture=config.encoder.architecture,
        normalize_embeddings=config.encoder.normalize_embeddings,
    )
    if config.train.mode == "triplet":
        if args.manifest is None:
            raise HistotripletError("triplet training requires --manifest")
        manifest = read_triplet_manifest(args.manifest)
        if pipe.spatial():
            patch_source = TilePatchSource(ImageDirectoryStore(pipe.slide_records()))
        else:
            patch_source = LabeledPatchSource(pipe.labeled_dataset())
        _, log = train_triplet(
            manifest,
            patch_source,
            train_config,
            encoder_config,
            TripletLossConfig(margin=config.loss.margin, reduction=config.loss.reduction),
            checkpoint_dir=pipe.output_dir,
        )
    else:
        _, log = train_supervised(
            pipe.labeled_dataset(),
            train_config,
            encoder_config,
            checkpoint_dir=pipe.output_dir,
        )
    log.write(pipe.output_dir / "train_log.jsonl")
    print(f"trained {len(log.steps)} steps; checkpoints in {pipe.output_dir}")
    return 0


def cmd_embed(args):
    model, _ = load_checkpoint(args.checkpoint)
    encoder = model.encoder if hasattr(model, "encoder") else model
    from .corpus.labeled import load_labeled_patches

    dataset, report = load_labeled_patches(
        args.labeled_root, crop="center", class_names=None
    )
    if report.skipped:
        print(f"skipped {len(report.skipped)} unusable images", file=sys.stderr)
    matrix = extract_embeddings(dataset, encoder, batch_size=args.batch_size)
    path = save_embeddings(args.out, matrix)
    print(f"wrote {len(matrix)}x{matrix.dim} embeddings to {path}")
    return 0


def _apply_labels_file(matrix, labels_path):
    mapping = {}
    from .manifests import read_jsonl

    for _, obj in read_jsonl(labels_path):
        mapping[obj["item_id"]] = obj["label"]
    missing = [i for i in matrix.item_ids if i not in mapping]
    if missing:
        raise HistotripletError(
            f"labels file lacks {len(missing)} item ids (first: {missing[0]!r})"
        )
    matrix.labels = [mapping[i] for i in matrix.item_ids]
    return matrix


def cmd_eval(args):
    models = {}
    for path in args.embeddings:
        matrix = load_embeddings(path)
        if args.labels:
            matrix = _apply_labels_file(matrix, args.labels)
        models[Path(path).stem] = matrix
    portions = tuple(float(p) / 100.0 for p in args.portions.split(","))
    config = _load_config(args.config)
    grid = SvmGrid(
        kernels=tuple(config.eval.kernels),
        c_values=tuple(config.eval.c_values),
        gamma_values=tuple(config.eval.gamma_values),
    )
    report = build_report(
        models,
        PortionSpec(fractions=portions, seed=args.seed),
        grid,
        k=config.eval.folds,
        cv_scope=config.eval.cv_scope,
        inner_k=config.eval.inner_folds,
    )
    out = Path(args.out)
    write_report(
        report,
        out,
        out.with_suffix(".txt"),
        out.with_name(out.stem + "_meta.json"),
    )
    from .transfer import report_to_text

    print(report_to_text(report))
    return 0


def cmd_plot(args):
    matrix = load_embeddings(args.embeddings)
    if args.labels:
        matrix = _apply_labels_file(matrix, args.labels)
    config = ProjectionConfig(n_neighbors=args.n_neighbors, seed=args.seed)
    coords = project_2d(matrix, config)
    out = Path(args.out)
    png, csv_path = render_scatter(coords, matrix.labels, matrix.item_ids, out)
    write_projection_metadata(
        out.with_name(out.stem + "_meta.json"), config, {"rows": len(matrix)}
    )
    print(f"wrote {png} and {csv_path}")
    return 0


def cmd_run(args):
    config = _load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    stages = args.stages.split(",") if args.stages else None
    manifest = run_pipeline(config, stages)
    done = [e["stage"] for e in manifest["artifacts"]]
    print(f"pipeline complete; artifacts from stages: {', '.join(done)}")
    print(f"run manifest: {Path(config.output_dir) / 'run_manifest.json'}")
    return 0


def cmd_validate(args):
    try:
        config = validate_config(args.config)
    except ConfigError as exc:
        print(f"{len(exc.violations)} configuration error(s):", file=sys.stderr)
        for path, message in exc.violations:
            print(f"  {path}: {message}", file=sys.stderr)
        return 1
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="histotriplet",
        description="Triplet representation learning and few-shot transfer "
        "evaluation for histopathology patches.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tile slides into a tile manifest")
    p.add_argument("--manifest", required=True, help="slide manifest (JSONL)")
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--magnification", type=float, default=20.0)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-saturation", type=float, default=0.05)
    p.add_argument("--no-tissue-filter", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("sample", help="generate a triplet manifest")
    p.add_argument("--config", required=True, help="run configuration (YAML)")
    p.add_argument("--out", required=True, help="triplet manifest path")
    p.add_argument("--type", choices=[t.value for t in DistantType])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train an encoder")
    p.add_argument("--mode", choices=("triplet", "xent"), required=True)
    p.add_argument("--manifest", help="triplet manifest (triplet mode)")
    p.add_argument("--config", required=True, help="run configuration (YAML)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a labeled patch directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labeled-root", required=True)
    p.add_argument("--out", required=True, help="embedding file path")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="portion/CV transfer evaluation")
    p.add_argument("--embeddings", nargs="+", required=True)
    p.add_argument("--labels", help="labels sidecar applied to all matrices")
    p.add_argument("--portions", default="5,10,25,50,100", help="percent list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="run configuration for grid/fold settings")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="2-D projection scatter")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels")
    p.add_argument("--n-neighbors", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output image path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("run", help="run the orchestrated pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", help="comma-separated subset of stages")
    p.add_argument("--output-dir", help="override config output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="validate a run configuration")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HistotripletError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
