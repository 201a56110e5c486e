"""``finprint`` command line: synth, cluster, train, embed, eval, report, pipeline.

Exit codes: 0 success, 1 domain or I/O error (one ``error: <kind>: <message>``
line on stderr), 2 usage error.  Every command records its resolved
configuration and output hashes in ``run.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from pathlib import Path

RUN_FILE = "run.json"


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------

def _size(text: str) -> tuple:
    parts = [int(p) for p in text.lower().replace(",", "x").split("x") if p]
    if len(parts) == 1:
        return parts[0], parts[0], 1
    if len(parts) == 2:
        return parts[0], parts[1], 1
    if len(parts) == 3:
        return tuple(parts)
    raise argparse.ArgumentTypeError(f"bad size {text!r}; use 64, 64x64 or 175x175x3")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_path(args, path) -> Path:
    p = Path(path)
    if not p.is_absolute() and getattr(args, "out_dir", None):
        p = Path(args.out_dir) / p
    return p


def _resolved(args) -> dict:
    skip = {"func", "config"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def write_run_record(directory, command: str, args, artifacts, started: str) -> Path:
    """Merge this command's entry into ``directory/run.json``."""
    from .core import file_sha256
    from . import kernels

    path = Path(directory) / RUN_FILE
    record = {}
    if path.exists():
        try:
            record = json.loads(path.read_text())
        except ValueError:
            record = {}
    record.setdefault("runs", {})[command] = {
        "argv": sys.argv[1:],
        "config": _resolved(args),
        "artifacts": {str(Path(a).name if Path(a).parent == Path(directory) else a): file_sha256(a)
                      for a in artifacts},
        "kernel_backend": kernels.BACKEND,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _emit(msg: str = "") -> None:
    print(msg, flush=True)


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    from .core import RngState
    from . import synth

    started = _now()
    out = _out_path(args, args.out)
    params = synth.AugmentParams(
        tilt_max_deg=args.tilt, vshift_max_frac=args.vshift,
        brightness_range=(args.brightness_low, args.brightness_high),
        noise_sigma=args.noise, copies_per_image=args.copies,
    )
    h, w, c = args.size
    ds = synth.build_dataset(
        args.ids, args.imgs_per_id, params, args.split_frac, RngState(args.seed), out,
        size=(h, w), spots_per_identity=args.spots, channels=c,
        split_by_identity=args.split_by_identity,
    )
    counts = synth.dataset_counts(ds.samples)
    manifest = out / "manifest.jsonl"
    write_run_record(out, "synth", args, [manifest], started)
    _emit(f"wrote {len(ds.samples)} samples ({counts['train']} train / {counts['test']} test) to {manifest}")
    return 0


def _read_relabels(path) -> dict:
    from .core import FileIOError, FormatError

    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    fixes = {}
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cluster", "identity"} <= set(reader.fieldnames):
            raise FormatError("relabel file needs columns cluster,identity", path, 1)
        for line, row in enumerate(reader, start=2):
            try:
                fixes[int(row["cluster"])] = int(row["identity"])
            except (TypeError, ValueError):
                raise FormatError("cluster and identity must be integers", path, line) from None
    return fixes


def cmd_cluster(args) -> int:
    from .core import read_boxes_csv
    from . import tracklet

    started = _now()
    boxes = read_boxes_csv(args.boxes)
    params = tracklet.TrackletParams(args.eps, args.min_pts, args.temporal_weight, args.max_distance)
    assignment = tracklet.cluster_boxes(boxes, params)
    if args.relabel:
        assignment = tracklet.apply_relabels(assignment, _read_relabels(args.relabel))
    out = _out_path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tracklet.write_clusters_csv(out, assignment)
    noise = sum(1 for c in assignment.clusters if c == tracklet.NOISE)
    _emit(f"{len(boxes)} boxes -> {assignment.n_clusters} clusters, {noise} noise")
    for s in assignment.spans:
        _emit(f"cluster {s.cluster}: frames {s.first_frame}-{s.last_frame} ({s.n_boxes} boxes)")
    write_run_record(out.parent, "cluster", args, [out], started)
    return 0


def _encoder_config(args, input_shape):
    from .model import ConvBlock, EncoderConfig

    blocks = tuple(ConvBlock(f) for f in args.filters)
    return EncoderConfig(tuple(input_shape), blocks, args.embed_dim)


def cmd_train(args) -> int:
    from .core import RngState, Split, load_samples
    from . import model, triplets

    started = _now()
    samples = load_samples(args.manifest)
    train_samples = [s for s in samples if s.split == Split.TRAIN]
    if not train_samples:
        from .core import ContractError
        raise ContractError(f"{args.manifest}: no training samples")
    config = _encoder_config(args, train_samples[0].pixels.shape)
    opt = model.adam(args.lr) if args.optimizer == "adam" else model.sgd(args.lr, args.momentum)
    ckpt = _out_path(args, args.ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = _out_path(args, args.log) if args.log else ckpt.parent / "mining.jsonl"
    with open(log_path, "w") as log:
        def on_epoch(rep):
            line = rep.to_json()
            log.write(line + "\n")
            log.flush()
            _emit(line)

        triplets.train(
            train_samples, config,
            triplets.BatchPlan(args.p, args.k), triplets.TripletLossParams(args.alpha),
            args.epochs, RngState(args.seed), opt, args.mining_metric,
            ckpt_path=ckpt, ckpt_every=args.ckpt_every, on_epoch=on_epoch,
        )
    write_run_record(ckpt.parent, "train", args, [ckpt, log_path], started)
    return 0


def cmd_embed(args) -> int:
    from .core import load_samples, write_tensor
    from . import model

    started = _now()
    weights, _ = model.load_checkpoint(args.ckpt)
    split = None if args.split == "all" else args.split
    samples = load_samples(args.manifest, split)
    if not samples:
        from .core import ContractError
        raise ContractError(f"{args.manifest}: no samples in split {args.split!r}")
    emb = model.embed(weights, samples, args.batch_size)
    out = _out_path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, emb.shape, emb)
    labels = out.with_suffix(".csv")
    with open(labels, "w") as fh:
        fh.write("sample_id,identity\n")
        for s in samples:
            fh.write(f"{s.sample_id},{s.identity}\n")
    write_run_record(out.parent, "embed", args, [out, labels], started)
    _emit(f"embedded {len(samples)} samples -> {out} ({emb.shape[0]}x{emb.shape[1]}), labels {labels}")
    return 0


def read_labels_csv(path):
    from .core import FileIOError, FormatError

    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FileIOError(path, exc.strerror or str(exc)) from exc
    ids, idents = [], []
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "identity"} <= set(reader.fieldnames):
            raise FormatError("labels file needs columns sample_id,identity", path, 1)
        for line, row in enumerate(reader, start=2):
            try:
                ids.append(int(row["sample_id"]))
                idents.append(int(row["identity"]))
            except (TypeError, ValueError):
                raise FormatError("sample_id and identity must be integers", path, line) from None
    return ids, idents


def cmd_eval(args) -> int:
    import numpy as np

    from .core import ContractError, read_tensor
    from . import evaluation

    started = _now()
    emb = read_tensor(args.embeddings)
    labels_path = args.labels or str(Path(args.embeddings).with_suffix(".csv"))
    ids, idents = read_labels_csv(labels_path)
    if emb.ndim != 2 or emb.shape[0] != len(idents):
        raise ContractError(f"{args.embeddings}: {emb.shape} embeddings for {len(idents)} labels")
    labels = np.asarray(idents)
    report = evaluation.evaluate(emb, labels, (args.fpr,))
    out = _out_path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json_dict(args.fpr), indent=2, sort_keys=True) + "\n")
    roc = out.parent / "roc.csv"
    with open(roc, "w") as fh:
        fh.write("threshold,tpr,fpr\n")
        for p in report.points:
            fh.write(f"{p.threshold!r},{p.tpr!r},{p.fpr!r}\n")
    proj = out.parent / "proj2d.csv"
    xy = evaluation.project_2d(emb)
    with open(proj, "w") as fh:
        fh.write("sample_id,identity,x,y\n")
        for sid, ident, (x, y) in zip(ids, idents, xy):
            fh.write(f"{sid},{ident},{x!r},{y!r}\n")
    write_run_record(out.parent, "eval", args, [out, roc, proj], started)
    _emit(format_summary(report.to_json_dict(args.fpr)))
    return 0


def format_summary(rep: dict) -> str:
    ratio = rep["ratio"]
    ratio_s = ratio if isinstance(ratio, str) else f"{ratio:.3f}"
    # AUC and TPR are printed unrounded so the summary matches report.json exactly
    return (f"AUC {rep['auc']!r} | TPR@FPR={rep.get('fpr_target', 0.01):g} {rep['tpr_at_fpr']!r} | "
            f"intra {rep['intra_mean']:.3f} inter {rep['inter_mean']:.3f} ratio {ratio_s} | "
            f"{rep['n_pos']} pos / {rep['n_neg']} neg pairs")


def cmd_report(args) -> int:
    from .core import FinprintError

    run = Path(args.run_dir)
    needed = {name: run / name for name in ("mining.jsonl", "report.json", "roc.csv")}
    missing = [str(p) for p in needed.values() if not p.is_file()]
    if missing:
        raise FinprintError("missing inputs: " + ", ".join(missing))
    reports = [json.loads(line) for line in needed["mining.jsonl"].read_text().splitlines() if line.strip()]
    rep = json.loads(needed["report.json"].read_text())
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,mean_loss\n")
        for r in reports:
            fh.write(f"{r['epoch']},{r['mean_loss']!r}\n")
    with open(out / "triplets_per_epoch.csv", "w") as fh:
        fh.write("epoch,candidates,used\n")
        for r in reports:
            fh.write(f"{r['epoch']},{r['candidates']},{r['used']}\n")
    (out / "roc.csv").write_text(needed["roc.csv"].read_text())
    summary = (f"epochs {len(reports)} | used triplets first {reports[0]['used'] if reports else 0} "
               f"last {reports[-1]['used'] if reports else 0}\n" + format_summary(rep) + "\n")
    (out / "summary.txt").write_text(summary)
    _emit(summary.rstrip())
    return 0


def cmd_pipeline(args) -> int:
    """synth -> train -> embed (test split) -> eval -> report in one run directory."""
    run = Path(args.out_dir or "run")
    run.mkdir(parents=True, exist_ok=True)
    common = ["--seed", str(args.seed)]
    steps = [
        ["synth", "--ids", str(args.ids), "--imgs-per-id", str(args.imgs_per_id),
         "--size", "x".join(str(v) for v in args.size), "--spots", str(args.spots),
         "--out", str(run / "data")],
        ["train", "--manifest", str(run / "data" / "manifest.jsonl"), "--epochs", str(args.epochs),
         "--alpha", str(args.alpha), "--p", str(args.p), "--k", str(args.k),
         "--mining-metric", args.mining_metric, "--ckpt-out", str(run / "model.ckpt")],
        ["embed", "--ckpt", str(run / "model.ckpt"), "--manifest", str(run / "data" / "manifest.jsonl"),
         "--split", "test", "--out", str(run / "embeddings.fnt")],
        ["eval", "--embeddings", str(run / "embeddings.fnt"), "--labels", str(run / "embeddings.csv"),
         "--fpr", str(args.fpr), "--out", str(run / "report.json")],
        ["report", "--run-dir", str(run)],
    ]
    parser = build_parser()
    for step in steps:
        sub = parser.parse_args(step[:1] + common + step[1:])
        _emit(f"== {step[0]}")
        code = sub.func(sub)
        if code:
            return code
    return 0


# -- parser ----------------------------------------------------------------

def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (results do not depend on it)")
    p.add_argument("--out-dir", default=None, help="base directory for relative output paths")
    p.add_argument("--config", default=None, help="JSON file whose keys mirror the flags (flags win)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finprint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic spot-pattern dataset")
    _global(p)
    p.add_argument("--ids", type=int, default=40)
    p.add_argument("--imgs-per-id", type=int, default=30)
    p.add_argument("--size", type=_size, default=(64, 64, 1), help="H, HxW or HxWxC")
    p.add_argument("--spots", type=int, default=8, help="spots per identity")
    p.add_argument("--split-frac", type=float, default=0.9)
    p.add_argument("--split-by-identity", action="store_true")
    p.add_argument("--copies", type=int, default=5, help="augmented copies per original")
    p.add_argument("--tilt", type=float, default=15.0, help="max tilt in degrees")
    p.add_argument("--vshift", type=float, default=0.10, help="max vertical shift, fraction of height")
    p.add_argument("--brightness-low", type=float, default=0.7)
    p.add_argument("--brightness-high", type=float, default=1.3)
    p.add_argument("--noise", type=float, default=0.02, help="pixel noise sigma")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="cluster per-frame boxes into individuals")
    _global(p)
    p.add_argument("--boxes", required=True)
    p.add_argument("--eps", type=float, default=0.4)
    p.add_argument("--min-pts", type=int, default=3)
    p.add_argument("--lambda", dest="temporal_weight", type=float, default=1.0 / 30.0,
                   help="temporal weight per frame of gap")
    p.add_argument("--max-distance", type=float, default=1e9)
    p.add_argument("--relabel", default=None, help="CSV cluster,identity of manual corrections")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train the encoder with mined triplets")
    _global(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--p", type=int, default=16, help="identities per batch")
    p.add_argument("--k", type=int, default=8, help="images per identity")
    p.add_argument("--mining-metric", choices=("l2", "sq-l2"), default="l2")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--filters", type=_int_list, default=(8, 16, 32))
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--log", default=None, help="mining JSONL (default: mining.jsonl next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed samples with a trained checkpoint")
    _global(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="verification metrics for embeddings")
    _global(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", default=None, help="sample_id,identity CSV (default: sidecar of --embeddings)")
    p.add_argument("--fpr", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plot-ready CSVs and a summary for a run directory")
    _global(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="synth, train, embed, eval and report in one go")
    _global(p)
    p.add_argument("--ids", type=int, default=40)
    p.add_argument("--imgs-per-id", type=int, default=30)
    p.add_argument("--size", type=_size, default=(64, 64, 1))
    p.add_argument("--spots", type=int, default=8)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--p", type=int, default=16)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--mining-metric", choices=("l2", "sq-l2"), default="l2")
    p.add_argument("--fpr", type=float, default=0.01)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _config_path(argv: list):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    """Parse ``argv``; keys of an optional ``--config`` JSON file act as flag defaults."""
    path = _config_path(argv)
    commands = parser._subparsers._group_actions[0].choices
    if path is None or not argv or argv[0] not in commands:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    sub = commands[argv[0]]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if key == "lambda":
            dest = "temporal_weight"
        if dest not in known or dest in ("help", "config"):
            raise UsageError(f"{path}: unknown key {key!r} for {argv[0]}")
        action = known[dest]
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        elif isinstance(value, list):
            value = tuple(value)
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"finprint: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .core import FinprintError

    try:
        return args.func(args)
    except FinprintError as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f"{exc.filename}: " if getattr(exc, "filename", None) else ""
        print(f"error: {type(exc).__name__}: {where}{exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
