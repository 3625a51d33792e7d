"""Command-line interface: ``cdrdesign {synth,train,predict,eval,check}``.

Exit codes: 0 success, 1 check or validation failure, 2 usage or I/O error.
The log level is read from ``CDRDESIGN_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checks import CHECKS, FAULTS, LEVELS, injected_fault, run_checks
from .config import RunConfig, apply_overrides, load_config
from .engine import resolve_dtype
from .errors import CdrDesignError, ConfigError
from .metrics import Prediction, evaluate_dataset, read_predictions, write_predictions
from .model import build_model, decode_string, prepare_example
from .structure import read_dataset, write_dataset
from .synthetic import SynthParams, generate_dataset
from .training import fit, load_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("cdrdesign")


class UsageError(Exception):
    pass


def _writable(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"cannot write {path}: directory {parent} does not exist")
    return p


def cmd_synth(args) -> int:
    params = SynthParams(
        cdr_len=args.cdr_len,
        antigen_len=args.antigen_len,
        planted_contact_fraction=args.contact_frac,
    )
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _writable(args.out)
    write_dataset(out, generate_dataset(args.count, args.seed, params))
    print(f"wrote {args.count} complexes to {out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("max_epochs", "seed", "precision", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = str(v)
    if overrides:
        cfg = apply_overrides(cfg, {"train": overrides})
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train = read_dataset(args.train)
    val = read_dataset(args.val)
    if not train or not val:
        raise UsageError("training and validation sets must be non-empty")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = [prepare_example(c, cfg.model) for c in train]
    va = [prepare_example(c, cfg.model) for c in val]
    model = build_model(cfg.model, cfg.train.dropout, cfg.train.seed, resolve_dtype(cfg.train.precision))
    resume = out_dir / "last.ckpt" if args.resume and (out_dir / "last.ckpt").exists() else None
    res = fit(model, tr, va, cfg, out_dir=out_dir, resume_from=resume)
    print(
        f"trained {len(res.history)} epoch(s); best epoch {res.best_epoch} "
        f"val loss {res.best_val:.4f}; checkpoint {out_dir / 'best.ckpt'}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg, _, _ = load_model(args.model)
    model.eval()
    complexes = read_dataset(args.input)
    out = _writable(args.out)
    preds = []
    with torch.no_grad():
        for c in complexes:
            o = model(prepare_example(c, cfg.model))
            preds.append(
                Prediction(
                    id=c.id,
                    sequence=decode_string(o),
                    cdr_ca=o.cdr_ca.double().numpy(),
                    contact_probs=o.contact_probs.double().numpy(),
                    logits=o.logits.double().numpy(),
                )
            )
    write_predictions(out, preds)
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


def _read_pred_or_complexes(path) -> list[Prediction]:
    """Accept a predictions file or a dataset of complexes (whose CDRs are taken as designs)."""
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is not None and "heavy" in json.loads(first):
        return [Prediction.from_complex(c) for c in read_dataset(path)]
    return read_predictions(path)


def cmd_eval(args) -> int:
    preds = _read_pred_or_complexes(args.pred)
    refs = read_dataset(args.ref)
    report = evaluate_dataset(preds, refs, superpose=args.superpose)
    if args.out:
        _writable(args.out).write_text(report.to_csv(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_check(args) -> int:
    if args.inject_fault and args.inject_fault not in FAULTS:
        raise UsageError(f"unknown fault {args.inject_fault!r}; known: {', '.join(sorted(FAULTS))}")
    unknown = sorted(set(args.only or ()) - set(CHECKS))
    if unknown:
        raise UsageError(f"unknown check(s) {', '.join(unknown)}; known: {', '.join(CHECKS)}")
    with injected_fault(args.inject_fault):
        results = run_checks(args.level, args.only)
    width = max(len(r.name) for r in results) if results else 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:7.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed ({args.level})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdrdesign", description="Contact-first CDR sequence and structure design.")
    p.add_argument("--threads", type=int, default=1, help="intra-op threads for torch (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output file (newline-delimited JSON complexes)")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cdr-len", type=int, default=10)
    s.add_argument("--antigen-len", type=int, default=30)
    s.add_argument("--contact-frac", type=float, default=0.4, help="fraction of CDR positions planted in contact")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--train", required=True, help="training dataset")
    t.add_argument("--val", required=True, help="validation dataset")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints, history.csv and config.ini")
    t.add_argument("--max-epochs", type=int, help="override [train] max_epochs")
    t.add_argument("--batch-size", type=int, help="override [train] batch_size")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--precision", choices=("float32", "float64"), help="override [train] precision")
    t.add_argument("--resume", action="store_true", help="continue from OUT_DIR/last.ckpt if present")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="design CDRs with a trained model")
    r.add_argument("--model", required=True, help="checkpoint file")
    r.add_argument("--in", dest="input", required=True, help="dataset of complexes")
    r.add_argument("--out", required=True, help="predictions file (newline-delimited JSON)")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predictions against references")
    e.add_argument("--pred", required=True, help="predictions file, or a dataset of complexes")
    e.add_argument("--ref", required=True, help="reference dataset")
    e.add_argument("--out", help="CSV report path")
    e.add_argument("--superpose", action="store_true", help="superpose CDR Cα before the RMSD")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the invariant suites")
    c.add_argument("--level", choices=LEVELS, default="fast")
    c.add_argument("--only", nargs="+", metavar="NAME", help="run only these checks")
    c.add_argument("--inject-fault", metavar="NAME", help="test hook: deliberately break a kernel")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CDRDESIGN_LOG_LEVEL", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config key {exc.key!r}: {exc}" if exc.key else f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CdrDesignError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
