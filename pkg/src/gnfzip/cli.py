"""Command-line interface.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error or missing/unreadable input file
    3  integrity failure (corrupt archive, checksum or verify mismatch)
    4  non-finite values during training
    5  invalid input data (bad FASTA, bad configuration)
    6  model does not match the archive (fingerprint or token size)
    7  unreadable checkpoint (bad magic, hash or version)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time

from . import __version__
from .errors import (CheckpointError, GnfError, InputError, IntegrityError, Mismatch, ModelMismatch,
                     NonFinite)

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INTEGRITY, EXIT_NONFINITE, EXIT_INPUT, EXIT_MODEL, EXIT_CKPT = range(8)

log = logging.getLogger("gnfzip")


class UsageError(Exception):
    pass


def default_seed() -> int:
    return int(os.environ.get("GNF_SEED", "0"))


def _read(path, mode="rb"):
    try:
        with open(path, mode) as fh:
            return fh.read()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


def _write_atomic(path, data: bytes):
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".gnf-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _load_entropy_model(args, ngram):
    """Checkpoint via -m, else a baseline via --model."""
    from .bench import parse_model_spec
    from .geneformer import GeneformerEntropyModel

    if getattr(args, "checkpoint", None):
        return GeneformerEntropyModel(_read(args.checkpoint))
    return parse_model_spec(args.model or "order-k:4", ngram)


def _grouping(args, model):
    from .grouping import GroupingConfig, fit_context

    cfg = getattr(model, "config", None)
    if cfg is not None:
        for flag, have in (("ngram", cfg.ngram), ("byte_group", cfg.byte_group), ("context", cfg.context_len)):
            want = getattr(args, flag)
            if want is not None and want != have:
                raise ModelMismatch(f"--{flag.replace('_', '-')} {want} conflicts with the checkpoint ({have})")
        return GroupingConfig(args.group_len, cfg.context_len, cfg.ngram, cfg.byte_group)
    ngram = args.ngram or 2
    g = args.byte_group or 4
    ctx = args.context or fit_context(ngram, g)
    return GroupingConfig(args.group_len, ctx, ngram, g)


# -- commands -----------------------------------------------------------------------

def cmd_compress(args) -> int:
    from .pipeline import compress
    from .sequence_io import parse_fasta

    t0 = time.perf_counter()
    records = parse_fasta(_read(args.input))
    model = _load_entropy_model(args, args.ngram or 2)
    grouping = _grouping(args, model)
    archive = compress(records, model, grouping, args.n_mode, args.workers)
    data = archive.to_bytes()
    out = args.output or args.input + ".gnf"
    _write_atomic(out, data)
    st = archive.stats(time.perf_counter() - t0)
    _emit({"output": out, **st.as_dict()})
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .pipeline import Archive, decompress
    from .sequence_io import write_fasta

    archive = Archive.from_bytes(_read(args.input))
    model = _load_entropy_model(args, archive.header.grouping.ngram) if (args.checkpoint or args.model) else None
    records = decompress(archive, model, args.workers)
    data = write_fasta(records)
    if args.output in (None, "-"):
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        _write_atomic(args.output, data)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .pipeline import Archive, verify
    from .sequence_io import parse_fasta

    records = parse_fasta(_read(args.original))
    archive = Archive.from_bytes(_read(args.archive))
    model = _load_entropy_model(args, archive.header.grouping.ngram) if (args.checkpoint or args.model) else None
    report = verify(records, archive, model, args.workers)
    _emit(report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .pipeline import Archive

    arc = Archive.from_bytes(_read(args.input))
    h = arc.header
    st = arc.stats()
    info = {"n_mode": h.n_mode, "model_kind": h.model_kind, "order": h.order,
            "fingerprint": h.fingerprint.hex(), "group_len": h.grouping.group_len,
            "context_len": h.grouping.context_len, "ngram": h.grouping.ngram,
            "byte_group": h.grouping.byte_group, "content_crc32": f"{h.crc:08x}",
            "sequences": [{"header": s.header, "length": s.length, "n_runs": len(s.side.runs),
                           "n_bases": s.side.count} for s in h.sequences],
            "payload_sizes": h.payload_sizes, **st.as_dict()}
    _emit(info)
    return EXIT_OK


def _model_config(args):
    from .geneformer import ModelConfig
    from .grouping import fit_context

    base = ModelConfig.toy() if args.toy else ModelConfig()
    kw = {}
    for name in ("d_model", "d_ff", "n_heads", "dropout", "embed_mode", "conv_kernel"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    ngram = args.ngram or base.ngram
    g = args.byte_group or base.byte_group
    kw.update(ngram=ngram, byte_group=g, context_len=args.context or fit_context(ngram, g),
              latent_array=not args.no_latent_array, segment_cut=not args.no_segment_cut, seed=args.seed)
    return ModelConfig(**{**base.to_json(), **kw})


def cmd_train(args) -> int:
    from .geneformer import GeneformerModel, count_params, save_checkpoint_file
    from .plotting import plot_history
    from .sequence_io import parse_fasta, split_dataset
    from .trainer import TrainConfig, evaluate_bpb, hybrid_train, train

    records = parse_fasta(_read(args.input))
    cfg = _model_config(args)
    toy = args.toy
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr if args.lr is not None else (2e-3 if args.hybrid else 1e-3),
        epochs=args.epochs if args.epochs is not None else (TOY_EPOCHS if toy else 100),
        seed=args.seed, eval_every=args.eval_every,
        max_examples=args.max_examples if args.max_examples is not None else (TOY_MAX_EXAMPLES if toy else None),
        max_seconds=args.max_seconds if args.max_seconds is not None else (TOY_MAX_SECONDS if toy else None))
    model = GeneformerModel(cfg)
    split = split_dataset(records, seed=args.seed)
    out = args.output or os.path.splitext(args.input)[0] + ".gfck"
    history = args.history or os.path.splitext(out)[0] + ".history.jsonl"
    log.info("training %s parameters on %d records", count_params(cfg), len(split[0]))
    if args.hybrid:
        other = split_dataset(parse_fasta(_read(args.hybrid)), seed=args.seed)
        res = hybrid_train(split[0], other[0], model, tcfg, split[1] or split[0], other[1] or other[0], history)
        tests = [split[2], other[2]]
    else:
        res = train(split, model, tcfg, history_path=history,
                    on_epoch=lambda r: log.info("epoch %s", json.dumps(r)))
        tests = [split[2]]
    best = res.model
    save_checkpoint_file(best, out)
    plot = None
    if args.plot:
        plot = plot_history(res.history, os.path.splitext(history)[0] + ".png")
    _emit({"checkpoint": out, "history": history, "plot": plot, "best_epoch": res.best_epoch,
           "best_val_bpb": res.best_bpb, "params": best.count_params(),
           "test_bpb": [evaluate_bpb(best, t) if t else None for t in tests]})
    return EXIT_OK


TOY_EPOCHS = 30
TOY_MAX_EXAMPLES = 50_000
TOY_MAX_SECONDS = 540.0


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .geneformer import ModelConfig
    from .trainer import TrainConfig

    toggles = {k: True for k in ("no_bg", "no_ng", "no_fg", "no_latent_array", "no_segment_cut")
               if getattr(args, k)}
    tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed, max_examples=args.max_examples,
                       max_seconds=args.train_seconds)
    models = [m for m in args.models.split(",") if m] if args.models else []
    for must in ("uniform", "order-k:4"):
        if must not in models:
            models.append(must)
    ngram, g = args.ngram or 2, args.byte_group or 4
    from .grouping import fit_context
    base = ModelConfig.toy(ngram=ngram, byte_group=g, context_len=fit_context(ngram, g), seed=args.seed)
    report = run_bench(args.input, models, args.checkpoint or [], ngram, g, args.group_len, args.workers,
                       not args.no_external, args.train, args.ablation, toggles, tcfg, base, args.seed,
                       args.n_mode, [int(w) for w in args.workers_scan.split(",")] if args.workers_scan else (),
                       log=log.info)
    print(report.text())
    if args.out:
        for path in report.write(args.out):
            log.info("wrote %s", path)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.to_json())
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .grouping import DEFAULT_GROUP_LEN

    p = argparse.ArgumentParser(prog="gnfzip", description="Lossless DNA compression with a learned entropy model.")
    p.add_argument("--version", action="version", version=f"gnfzip {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("-m", "--checkpoint", help="trained model checkpoint (.gfck)")
        sp.add_argument("--model", help="baseline model: uniform | order-k:<k> (default order-k:4)")
        sp.add_argument("--workers", type=int, default=None,
                        help="groups coded in lockstep per model call (default: all)")

    def grouping_flags(sp):
        sp.add_argument("--group-len", type=int, default=DEFAULT_GROUP_LEN)
        sp.add_argument("--ngram", type=int, default=None)
        sp.add_argument("--byte-group", type=int, default=None)
        sp.add_argument("--context", type=int, default=None, help="context bases (default: up to 64)")

    sp = sub.add_parser("compress", help="FASTA -> .gnf archive")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    model_flags(sp)
    grouping_flags(sp)
    sp.add_argument("--n-mode", choices=["side-channel", "in-stream"], default="side-channel")
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help=".gnf archive -> FASTA")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", help="output FASTA (default stdout)")
    model_flags(sp)
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("verify", help="decode an archive and compare with the original FASTA")
    sp.add_argument("original")
    sp.add_argument("archive")
    model_flags(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("inspect", help="dump an archive header")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("train", help="train an entropy model checkpoint")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", help="checkpoint path (default <input>.gfck)")
    sp.add_argument("--history", help="JSON-lines history log")
    sp.add_argument("--plot", action="store_true", help="also render the history as PNG")
    sp.add_argument("--toy", action="store_true", help="small desk-scale preset (d_m 64, d_ff 256)")
    sp.add_argument("--hybrid", help="second FASTA for hybrid two-dataset training")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--eval-every", type=int, default=1)
    sp.add_argument("--max-examples", type=int, default=None)
    sp.add_argument("--max-seconds", type=float, default=None)
    sp.add_argument("--seed", type=int, default=default_seed())
    sp.add_argument("--ngram", type=int, default=None)
    sp.add_argument("--byte-group", type=int, default=None)
    sp.add_argument("--context", type=int, default=None)
    sp.add_argument("--d-model", type=int, default=None)
    sp.add_argument("--d-ff", type=int, default=None)
    sp.add_argument("--n-heads", type=int, default=None)
    sp.add_argument("--dropout", type=float, default=None)
    sp.add_argument("--conv-kernel", type=int, default=None)
    sp.add_argument("--embed-mode", choices=["learned", "one-hot"], default=None)
    sp.add_argument("--no-latent-array", action="store_true")
    sp.add_argument("--no-segment-cut", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", help="benchmark methods and ablations on a FASTA file")
    sp.add_argument("input")
    sp.add_argument("--models", help="comma list of baselines (uniform and order-k:4 always run)")
    sp.add_argument("-m", "--checkpoint", action="append", help="checkpoint to include (repeatable)")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--workers-scan", help="comma list of lane counts to time, e.g. 1,2,4,8")
    sp.add_argument("--group-len", type=int, default=DEFAULT_GROUP_LEN)
    sp.add_argument("--ngram", type=int, default=None)
    sp.add_argument("--byte-group", type=int, default=None)
    sp.add_argument("--n-mode", choices=["side-channel", "in-stream"], default="side-channel")
    sp.add_argument("--train", action="store_true", help="train and include a toy neural model")
    sp.add_argument("--ablation", action="store_true", help="run the BG/NG/FG and latent/cut grids")
    for flag in ("no-bg", "no-ng", "no-fg", "no-latent-array", "no-segment-cut"):
        sp.add_argument(f"--{flag}", action="store_true")
    sp.add_argument("--train-seconds", type=float, default=60.0, help="training budget per model")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--max-examples", type=int, default=TOY_MAX_EXAMPLES)
    sp.add_argument("--seed", type=int, default=default_seed())
    sp.add_argument("--no-external", action="store_true", help="skip gzip/bzip2/xz rows")
    sp.add_argument("--out", help="directory for report.json/.tsv/.txt and PNG figures")
    sp.add_argument("--json", help="also write the machine-readable report here")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"gnfzip: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Mismatch as e:
        print(f"gnfzip: verify failed: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except IntegrityError as e:
        print(f"gnfzip: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NonFinite as e:
        print(f"gnfzip: NonFinite: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except ModelMismatch as e:
        print(f"gnfzip: ModelMismatch: {e}", file=sys.stderr)
        return EXIT_MODEL
    except CheckpointError as e:
        print(f"gnfzip: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CKPT
    except InputError as e:
        print(f"gnfzip: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except GnfError as e:
        print(f"gnfzip: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
