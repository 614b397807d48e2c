"""``disam`` command line.

Exit codes: 0 success, 1 invalid input (flags, files, configuration),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, retrieval, samcore, synthgen
from .config import build_run_config, parse_config_text
from .datamodel import load_manifest, read_image
from .errors import DisamError, FlagConflict, ValidationError
from .gradcheck import check_similarity_gradient
from .network import load_checkpoint

log = logging.getLogger("disam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags():
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand's defaults do not mask flags given before it
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness")
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat key=value configuration file")
    p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser():
    common = _global_flags()
    parser = _Parser(prog="disam", description="Domain-invariant place recognition toolkit.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain dataset")
    p.add_argument("--places", type=int, default=24)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a coarse or fine model")
    p.add_argument("--stage", choices=("coarse", "fine"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--warm-start")
    p.add_argument("--margin", choices=("adaptive", "constant"))
    p.add_argument("--negatives", choices=("random", "hard", "auto"))
    p.add_argument("--epochs", type=int, help="stop after this epoch (schedule unchanged)")

    p = sub.add_parser("build-db", parents=[common], help="encode the database split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="feature database file to write")
    p.add_argument("--domain", type=int, help="encoder to use (default: each record's domain)")

    p = sub.add_parser("retrieve", parents=[common], help="rank database entries for queries")
    p.add_argument("--db", required=True, help="feature database (coarse model for c2f)")
    p.add_argument("--checkpoint", required=True, help="model that built --db")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("coarse", "fine", "c2f"), default="coarse")
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--fine-checkpoint", help="fine model for --mode c2f")
    p.add_argument("--fine-db", help="optional pre-built fine feature database for --mode c2f")
    p.add_argument("--split", default="query")
    p.add_argument("--out", help="directory for results.txt (default: stdout)")

    p = sub.add_parser("evaluate", parents=[common], help="localization accuracy and recall@N")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--thresholds", default="0.25,2;0.5,5;5,10")
    p.add_argument("--recall-n", type=int, default=0)
    p.add_argument("--radius", type=float, default=None,
                   help="count database entries within this many meters as correct for recall")
    p.add_argument("--out", help="directory for report.txt")

    p = sub.add_parser("gradcheck", parents=[common], help="check the similarity gradient")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--shape", default="8,5,5")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("plot-sam", parents=[common], help="render activation-map overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query", required=True, nargs="+", help="query record ids")
    p.add_argument("--reference", nargs="+", help="reference ids (default: same place in domain 0)")
    p.add_argument("--out", required=True)
    return parser


def _seed(args, default=0):
    seed = getattr(args, "seed", None)
    return default if seed is None else seed


def cmd_synth(args, out):
    cfg = synthgen.SynthConfig(n_places=args.places, n_domains=args.domains, views_per_place=args.views,
                               image_size=args.image_size, seed=_seed(args))
    manifest = synthgen.generate(cfg, args.out)
    print(f"wrote {len(manifest.records)} images to {args.out}", file=out)


def cmd_train(args, out):
    from .trainer import run_training

    if args.resume and args.warm_start:
        raise FlagConflict("--resume and --warm-start are mutually exclusive")
    manifest = load_manifest(args.manifest)
    config_path = getattr(args, "config", None)
    values = parse_config_text(Path(config_path).read_text(), config_path) if config_path else {}
    values.setdefault("n_domains", str(manifest.n_domains))
    values.setdefault("image_size", str(manifest.image_size[0]))
    overrides = {"margin": args.margin, "negatives": args.negatives, "seed": getattr(args, "seed", None)}
    run = build_run_config(values, overrides)
    if run.network.n_domains != manifest.n_domains:
        raise ValidationError(
            f"config n_domains={run.network.n_domains} but manifest declares {manifest.n_domains}"
        )
    if run.network.image_size != manifest.image_size[0]:
        raise ValidationError("config image_size does not match the manifest")
    print("# effective configuration", file=out)
    print(f"stage = {args.stage}", file=out)
    out.write(run.to_text())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(run.to_text())
    bundle = run_training(manifest, run.network, run.weights, run.schedule, args.stage, out_dir,
                          resume=args.resume, warm_start=args.warm_start, epochs=args.epochs)
    print(f"finished at epoch {bundle.epoch}; checkpoints in {out_dir}", file=out)


def cmd_build_db(args, out):
    bundle = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    db = retrieval.build_feature_db(bundle, manifest, args.domain, args.out)
    print(f"wrote {len(db)} entries of shape {db.shape} to {args.out}", file=out)


def cmd_retrieve(args, out):
    manifest = load_manifest(args.manifest)
    db = retrieval.read_feature_db(args.db)
    bundle = load_checkpoint(args.checkpoint)
    queries = manifest.by_split(args.split)
    if not queries:
        raise ValidationError(f"manifest has no {args.split!r} records")
    results = []
    if args.mode == "c2f":
        if not args.fine_checkpoint:
            raise ValidationError("--mode c2f requires --fine-checkpoint")
        fine = load_checkpoint(args.fine_checkpoint)
        fine_db = retrieval.read_feature_db(args.fine_db) if args.fine_db else None
        top_n = args.top_n or 3
        for r in queries:
            results.append(retrieval.coarse_to_fine(
                db, fine, bundle, read_image(manifest.resolve(r)), r.domain, top_n,
                manifest=manifest, fine_db=fine_db, query_id=r.id))
    else:
        retrieval.check_fingerprint(db, bundle)
        search = retrieval.coarse_retrieve if args.mode == "coarse" else retrieval.fine_retrieve
        top_n = args.top_n or len(db)
        for r in queries:
            q = retrieval.encode_image(bundle, r.domain, read_image(manifest.resolve(r)))
            results.append(search(db, q, top_n, query_id=r.id))
    text = retrieval.format_results(results)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "results.txt").write_text(text)
        print(f"wrote results for {len(results)} queries", file=out)
    else:
        out.write(text)


def cmd_evaluate(args, out):
    manifest = load_manifest(args.manifest)
    ranked = retrieval.parse_results(Path(args.results).read_text())
    records = manifest.by_id()
    unknown = [q for q in ranked if q not in records]
    if unknown:
        raise ValidationError(f"query {unknown[0]!r} is not in the manifest")
    preds = []
    for qid, entries in ranked.items():
        best = records.get(entries[0][0])
        if best is None or best.pose is None:
            raise ValidationError(f"database entry {entries[0][0]!r} has no pose in the manifest")
        preds.append((qid, best.pose))
    gt = {qid: records[qid].pose for qid in ranked}
    cond = {qid: manifest.domain_names[records[qid].domain] for qid in ranked}
    report = evaluation.localize_percentages(preds, gt, evaluation.parse_thresholds(args.thresholds), cond)
    if args.recall_n:
        ids = {q: [d for d, _ in v] for q, v in ranked.items()}
        report.recall = evaluation.recall_at_n(
            ids, {q: records[q].place for q in ranked}, {r.id: r.place for r in manifest.records},
            args.recall_n, query_poses=gt, db_poses={r.id: r.pose for r in manifest.records},
            radius=args.radius)
    text = report.table() + "\n" + "\n".join(report.lines()) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.txt").write_text("\n".join(report.lines()) + "\n")
    out.write(text)


def cmd_gradcheck(args, out):
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
    except ValueError:
        raise ValidationError(f"bad --shape {args.shape!r}") from None
    res = check_similarity_gradient(args.pairs, shape, _seed(args), args.step, args.tolerance)
    print(f"pairs={res.n_pairs} shape={shape} max_rel_error={res.max_rel_error:.3e} "
          f"tolerance={res.tolerance:g} {'PASS' if res.passed else 'FAIL'}", file=out)
    return 0 if res.passed else 2


def cmd_plot_sam(args, out):
    bundle = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = manifest.by_id()
    refs = args.reference or [None] * len(args.query)
    if len(refs) != len(args.query):
        raise ValidationError("--reference needs one id per --query")
    from .plotting import save_overlay_pair

    out_dir = Path(args.out)
    for qid, rid in zip(args.query, refs):
        if qid not in records:
            raise ValidationError(f"unknown record {qid!r}")
        q = records[qid]
        if rid is None:
            match = [r for r in manifest.records if r.place == q.place and r.domain == 0 and r.id != qid]
            if not match:
                raise ValidationError(f"no reference found for {qid!r}; pass --reference")
            ref = match[0]
        elif rid in records:
            ref = records[rid]
        else:
            raise ValidationError(f"unknown record {rid!r}")
        xq, xr = read_image(manifest.resolve(q)), read_image(manifest.resolve(ref))
        zq = retrieval.encode_image(bundle, q.domain, xq)
        zr = retrieval.encode_image(bundle, ref.domain, xr)
        path = out_dir / f"sam_{qid}__{ref.id}.png"
        save_overlay_pair(path, xq, samcore.activation_map(zq, zr), xr, samcore.activation_map(zr, zq))
        print(f"wrote {path}", file=out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "build-db": cmd_build_db,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "plot-sam": cmd_plot_sam,
}


def dispatch(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = _seed(args)
    np.random.seed(seed)
    torch.manual_seed(seed)
    try:
        code = COMMANDS[args.command](args, out)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"disam {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DisamError as exc:
        print(f"disam {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"disam {args.command}: failed: {exc!r}", file=sys.stderr)
        return 2
    return code or 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
