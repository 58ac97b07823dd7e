"""Command-line interface.

One executable with subcommands covering the whole pipeline: corpus
synthesis, descriptor extraction, whitening/model initialization, training,
indexing, search, evaluation, and the speed-transformation benchmark.

Exit codes: 0 success, 2 usage error, 3 data error (corrupt or missing
inputs), 4 model/configuration error (including stale indexes and diverged
training).  All subcommands are deterministic given identical inputs, seeds,
and flags; worker count comes from the AUSIL_WORKERS environment variable
and affects throughput only, never results.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus, features, retrieval, training
from .audio import load_audio
from .backbone import BackboneConfig
from .errors import AusilError, DataError, ModelError, TrainingDivergedError
from .evaluation import format_pr_curve, format_report, pr_curve
from .model import Model, build_model, new_backbone

log = logging.getLogger("ausil")


def _add_step(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--step", type=float, default=1.0, metavar="SECONDS",
                        help="segment stride; 0.125 suits very short clips (default 1.0)")


def _add_model(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument("--model", type=Path, required=required, help="model weight file")


def _load_manifest(path: Path) -> corpus.DatasetManifest:
    return corpus.load_manifest(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- Subcommand implementations ------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    transforms = corpus.TRANSFORM_KINDS if args.transforms is None else tuple(
        t for t in args.transforms.split(",") if t
    )
    recipe = corpus.SyntheticRecipe(
        seed=args.seed,
        references=args.references,
        queries=args.queries,
        duplicates_per_query=args.duplicates,
        distractors=args.distractors,
        transforms=transforms,
        min_transforms=args.min_transforms if transforms else 0,
        max_transforms=args.max_transforms if transforms else 0,
    )
    manifest = corpus.synth_corpus(recipe, args.out)
    print(f"manifest\t{args.out / 'manifest.jsonl'}")
    print(f"clips\t{len(manifest.clips)}")
    print(f"queries\t{len(manifest.queries())}")
    return 0


def cmd_fit_pca(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    config = BackboneConfig.full_scale() if args.scale == "full" else BackboneConfig.desk_scale()
    tensors = new_backbone(config, args.seed)
    clip_ids = manifest.ids()
    if args.max_clips is not None:
        clip_ids = clip_ids[: args.max_clips]
    if not clip_ids:
        raise DataError("manifest has no clips to fit the whitening on")

    def mac_of(cid: str):
        return features.clip_mac_matrix(load_audio(manifest.path(cid)), tensors, args.step)

    rows = np.concatenate(retrieval.map_ordered(mac_of, sorted(clip_ids)), axis=0)
    pca = features.fit_pca_whitening(rows, out_dim=args.pca_dim)
    model = build_model(tensors, pca, args.seed)
    model.save(args.out)
    print(f"model\t{args.out}")
    print(f"mac_dim\t{config.mac_dim}")
    print(f"fit_rows\t{rows.shape[0]}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    model = Model.load(args.model)
    clip_ids = manifest.ids() if args.role == "all" else [
        c.clip_id for c in manifest.clips if c.role == args.role
    ]
    feats = retrieval.extract_features(manifest, clip_ids, model, args.step, args.variant)
    records = [(cid, feats[cid]) for cid in sorted(feats)]
    retrieval.write_feature_store(args.out, records, model.sha256 or "", args.variant, args.step)
    print(f"features\t{args.out}")
    print(f"clips\t{len(records)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    model = Model.load(args.model)
    config = training.TrainConfig(
        epochs=args.epochs,
        triplets_per_epoch=args.triplets,
        learning_rate=args.lr,
        margin=args.gamma,
        reg_weight=args.reg,
        step_seconds=args.step,
        positive_threshold=args.pos_threshold,
        negative_margin=args.neg_margin,
        seed=args.seed,
    )
    involved = sorted(set(manifest.queries()) | set(manifest.searchable()))
    macs = dict(
        zip(
            involved,
            retrieval.map_ordered(
                lambda cid: model.mac_matrix(load_audio(manifest.path(cid)), args.step), involved
            ),
        )
    )
    h_matrices = {cid: features.apply_whitening(mac, model.pca) for cid, mac in macs.items()}
    globals_map = {cid: features.global_descriptor(mac) for cid, mac in macs.items()}
    positives = {q: set(dups) for q, dups in manifest.positives.items() if dups}
    args.out.mkdir(parents=True, exist_ok=True)
    training.train(
        model,
        h_matrices,
        globals_map,
        positives,
        manifest.searchable(),
        config,
        out_dir=args.out,
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    out_model = args.out / "model.bin"
    model.save(out_model)
    print(f"model\t{out_model}")
    print(f"log\t{args.out / 'train_log.tsv'}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    model = Model.load(args.model) if args.model else None
    info = retrieval.build_index(
        manifest, args.method, args.out, model=model, step_seconds=args.step, variant=args.variant
    )
    print(f"index\t{args.out}")
    print(f"clips\t{info.count}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    model = Model.load(args.model) if args.model else None
    ranked = retrieval.search(args.index, load_audio(args.query), top_k=args.top_k, model=model)
    for clip_id, score in ranked:
        print(f"{clip_id}\t{score:.6f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    model = Model.load(args.model) if args.model else None
    report, rankings = retrieval.evaluate_method(
        manifest, args.method, model=model, step_seconds=args.step, variant=args.variant
    )
    if args.out:
        _write_text(args.out, format_report(report))
    if args.pr:
        _write_text(args.pr, format_pr_curve(pr_curve(rankings)))
    print(f"mAP\t{report.mean_ap:.6f}")
    return 0


def cmd_bench_speed(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.manifest)
    model = Model.load(args.model) if args.model else None
    factors = [float(f) for f in args.factors.split(",") if f]
    report = retrieval.speed_benchmark(
        manifest, args.method, factors=factors, model=model, step_seconds=args.step, variant=args.variant
    )
    text = retrieval.format_speed_report(report)
    if args.out:
        _write_text(args.out, text)
    print(text, end="")
    return 0


def cmd_fingerprint(args: argparse.Namespace) -> int:
    from .audio import mel_spectrogram
    from .baselines import fingerprint_spectrogram

    clip = load_audio(args.audio)
    fp = fingerprint_spectrogram(mel_spectrogram(clip), args.method)
    if args.method == "constellation":
        print(f"entries\t{fp.entries.shape[0]}")
    elif args.method == "slides":
        print(f"windows\t{fp.profiles.shape[0]}")
    else:
        print(f"windows\t{fp.positions.shape[0]}")
    if args.out:
        retrieval.write_fingerprint_db(args.out, args.method, [(clip.source_id, fp)])
        print(f"fingerprints\t{args.out}")
    return 0


# -- Parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ausil", description="Audio near-duplicate detection and retrieval toolkit."
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--references", type=int, default=200)
    p.add_argument("--queries", type=int, default=40)
    p.add_argument("--duplicates", type=int, default=6)
    p.add_argument("--distractors", type=int, default=500)
    p.add_argument("--transforms", default=None,
                   help="comma-separated transform kinds; empty string for exact copies")
    p.add_argument("--min-transforms", type=int, default=1)
    p.add_argument("--max-transforms", type=int, default=2)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit-pca", help="initialize a model: backbone, whitening, attention, refiner")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--pca-dim", type=int, default=None, help="whitened dimension (default: descriptor size)")
    p.add_argument("--max-clips", type=int, default=None, help="fit on at most this many clips")
    _add_step(p)
    p.set_defaults(fn=cmd_fit_pca)

    p = sub.add_parser("extract", help="write a descriptor store for manifest clips")
    p.add_argument("--manifest", type=Path, required=True)
    _add_model(p, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=retrieval.AUSIL_VARIANTS, default="cnn")
    p.add_argument("--role", choices=("all", "query", "reference", "distractor"), default="all")
    _add_step(p)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train", help="train attention and refinement weights on mined triplets")
    p.add_argument("--manifest", type=Path, required=True)
    _add_model(p, required=True)
    p.add_argument("--out", type=Path, required=True, help="directory for checkpoints, log, and final model")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--triplets", type=int, default=200, help="triplets per epoch (0 = all mined)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=1.0, help="triplet margin")
    p.add_argument("--reg", type=float, default=0.1, help="saturation penalty weight")
    p.add_argument("--pos-threshold", type=float, default=0.175)
    p.add_argument("--neg-margin", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    _add_step(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("index", help="build a searchable index over the manifest's reference set")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--method", choices=retrieval.METHODS, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_model(p, required=False)
    p.add_argument("--variant", choices=retrieval.AUSIL_VARIANTS, default="cnn")
    _add_step(p)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("search", help="rank indexed clips against a query WAV")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--query", type=Path, required=True)
    _add_model(p, required=False)
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("evaluate", help="retrieval evaluation over the manifest's annotated queries")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--method", choices=retrieval.METHODS, required=True)
    _add_model(p, required=False)
    p.add_argument("--variant", choices=retrieval.AUSIL_VARIANTS, default="cnn")
    p.add_argument("--out", type=Path, default=None, help="write the per-query report here")
    p.add_argument("--pr", type=Path, default=None, help="write interpolated PR-curve points here")
    _add_step(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench-speed", help="mAP against speed-transformed copies of the queries")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--method", choices=retrieval.METHODS, required=True)
    _add_model(p, required=False)
    p.add_argument("--variant", choices=retrieval.AUSIL_VARIANTS, default="cnn")
    p.add_argument("--factors", default="0.25,0.5,0.75,1.25,1.5,2")
    p.add_argument("--out", type=Path, default=None)
    _add_step(p)
    p.set_defaults(fn=cmd_bench_speed)

    p = sub.add_parser("fingerprint", help="fingerprint one audio file")
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--method", choices=("constellation", "slides", "tiles"), required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_fingerprint)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (ModelError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AusilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    raise SystemExit(main())
