"""``fairmoe`` command line: synth, train, eval, metrics, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes ``run_manifest.json`` into its output directory with the exact
arguments, resolved config and seed, which is enough to rerun it.

Dataset schema (``synth`` output, ``--data`` input): a directory with
``manifest.jsonl`` (one ``{"id", "image_path", "tokens", "label",
"attributes"}`` record per line), ``meta.json`` (``image_size``,
``vocab_size``, ...) and ``images/<id>.f64`` raw little-endian float64
``S x S`` blobs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    ATTRIBUTE_GROUPS,
    DEFAULT_PRIORS,
    SchemaError,
    SynthSpec,
    from_pairs,
    group_probe_accuracy,
    load_manifest,
    split,
    synthesize,
    write_dataset,
)
from .metrics import ATTRIBUTES, DPD_MODES, evaluate_attribute, format_table, read_predictions, write_predictions, write_reports
from .nncore import ContractError
from .train import SUITES, TrainConfig, evaluate, format_config, format_grid, load_config, run_ablation_suite, save_log, train

log = logging.getLogger("fairmoe")

SPLIT_SEED = 0  # data split is shared by every run on a dataset so seeds stay paired
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flag combination detected after argparse (exit code 2)."""


def _write_manifest(out: Path, command: str, args: argparse.Namespace, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func",)}
    doc = {"command": command, "version": __version__, "argv": sys.argv[1:], "flags": flags, **extra}
    (out / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _attrs(value: str) -> list[str]:
    if value == "all":
        return list(ATTRIBUTES)
    if value not in ATTRIBUTES:
        raise UsageError(f"--attr must be one of {', '.join(ATTRIBUTES)} or all")
    return [value]


def _splits(data: Path, cfg: TrainConfig):
    ds = load_manifest(data, vocab_size=cfg.vocab_size, image_size=cfg.image_size)
    return split(ds, cfg.split_fractions(), seed=SPLIT_SEED)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    priors = {k: list(v) for k, v in DEFAULT_PRIORS.items()}
    if args.priors:
        user = json.loads(Path(args.priors).read_text())
        unknown = set(user) - set(ATTRIBUTE_GROUPS)
        if unknown:
            raise ContractError(f"priors file has unknown attributes {sorted(unknown)}")
        priors.update(user)
    spec = SynthSpec(n=args.n, seed=args.seed, bias_strength=args.bias, group_priors=priors)
    pairs = synthesize(spec)
    out = Path(args.out)
    write_dataset(pairs, out, spec)
    probe = {}
    if len(pairs) >= 4:
        ds = from_pairs(pairs, spec)
        probe = {a: group_probe_accuracy(ds, a, seed=args.seed) for a in ATTRIBUTES}
    _write_manifest(out, "synth", args, probe_accuracy=probe)
    print(f"wrote {len(pairs)} records to {out}")
    for a, acc in probe.items():
        chance = max(priors[a])
        print(f"  probe accuracy [{a:<9}] {acc:.3f}   (majority-class rate {chance:.2f})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "steps": args.steps})
    tr, va, _ = _splits(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    t0 = time.time()

    def progress(rec):
        if rec["step"] % args.print_every == 0 or rec["step"] == 1:
            parts = "  ".join(f"{k}={rec[k]:.5g}" for k in rec if k != "step")
            print(f"step {rec['step']:>5}  {parts}", flush=True)

    res = train(cfg, tr, va, resume=resume, on_step=progress)
    save_checkpoint(res.checkpoint, out / "last.ckpt")
    save_checkpoint(res.best, out / "best.ckpt")
    log_path = out / "loss_log.jsonl"
    if resume is not None and log_path.exists():
        # keep the earlier part of the log, drop anything past the resume point
        kept = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
        kept = [r for r in kept if r["step"] <= resume.step]
        save_log(kept + res.log, log_path)
    else:
        save_log(res.log, log_path)
    (out / "config.txt").write_text(format_config(cfg))
    _write_manifest(out, "train", args, config=cfg.to_dict(), split_seed=SPLIT_SEED, final_step=res.checkpoint.step)
    sel = res.best.extras.get("selected", "last")
    print(f"done in {time.time() - t0:.1f}s; checkpoints in {out} (best.ckpt selected by {sel})")
    return 0


def cmd_eval(args) -> int:
    attrs = _attrs(args.attr)
    ckpt = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    ds = load_manifest(args.data, vocab_size=cfg.vocab_size, image_size=cfg.image_size)
    test = ds if args.split == "all" else split(ds, cfg.split_fractions(), seed=SPLIT_SEED)[2]
    records, reports = evaluate(ckpt, test, attributes=attrs, dpd_mode=args.dpd_mode, threshold=args.threshold, bootstrap=args.bootstrap, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out / "predictions.jsonl")
    write_reports(reports, out / "report.json")
    _write_manifest(out, "eval", args, split_seed=SPLIT_SEED, n_test=len(test))
    print(format_table(reports, title=f"{Path(args.ckpt).name} on {len(test)} pairs ({args.split})"))
    return 0


def cmd_metrics(args) -> int:
    attrs = _attrs(args.attr)
    records = read_predictions(args.predictions)
    reports = [evaluate_attribute(records, a, args.threshold, args.dpd_mode, args.bootstrap, args.seed) for a in attrs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "report.json")
    _write_manifest(out, "metrics", args)
    print(format_table(reports, title=f"{Path(args.predictions).name}: {len(records)} predictions"))
    return 0


def _ablate_one(payload):
    base, data, variant, seeds, attrs, dpd_mode = payload
    cfg = TrainConfig.from_dict(base)
    ds = load_manifest(data, vocab_size=cfg.vocab_size, image_size=cfg.image_size)
    parts = split(ds, cfg.split_fractions(), seed=SPLIT_SEED)
    return run_ablation_suite(cfg, tuple(parts), [variant], seeds, attrs, dpd_mode)


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = load_config(args.config)
    attrs = _attrs(args.attr) if args.attr else [cfg.fol_attribute]
    seeds = [cfg.seed + i for i in range(args.seeds)]
    variants = SUITES[args.suite]
    payloads = [(cfg.to_dict(), str(args.data), v, seeds, attrs, args.dpd_mode) for v in variants]
    if args.jobs > 1 and len(variants) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(variants))) as pool:
            chunks = list(pool.map(_ablate_one, payloads))
    else:
        chunks = []
        for p in payloads:
            log.info("variant %s", p[2][0])
            chunks.append(_ablate_one(p))
    rows = [r for a in attrs for chunk in chunks for r in chunk if r.attribute == a]
    grid = format_grid(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.txt").write_text(grid + "\n")
    doc = [
        {"variant": r.variant, "attribute": r.attribute, "seeds": seeds, **{k: r.stat(k)[0] for k in ("es_auc", "auc", "dpd", "eod")},
         "std": {k: r.stat(k)[1] for k in ("es_auc", "auc", "dpd", "eod")}}
        for r in rows
    ]
    (out / "grid.json").write_text(json.dumps(doc, indent=2) + "\n")
    _write_manifest(out, "ablate", args, config=cfg.to_dict(), seeds=seeds, split_seed=SPLIT_SEED)
    print(f"suite {args.suite}, seeds {seeds}, DPD mode {args.dpd_mode}")
    print(grid)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairmoe", description="Fairness-aware sparse MoE on a toy dual encoder.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic biased dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--bias", type=float, default=0.9, help="fraction of samples carrying group artifacts")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--priors", type=Path, help='JSON {"race": [..], ...}; missing attributes keep defaults')
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", type=int, help="override the config's step count")
    t.add_argument("--resume", type=Path, help="continue from a last.ckpt")
    t.add_argument("--print-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--attr", default="all")
    e.add_argument("--dpd-mode", choices=DPD_MODES, default="standard")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for 95%% CIs")
    e.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--out", type=Path, help="report directory (default: <ckpt dir>/eval)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="compute metrics from a predictions JSONL file")
    m.add_argument("--predictions", required=True, type=Path)
    m.add_argument("--attr", default="all")
    m.add_argument("--dpd-mode", choices=DPD_MODES, default="standard")
    m.add_argument("--threshold", type=float, default=0.5)
    m.add_argument("--bootstrap", type=int, default=0)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, type=Path)
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("ablate", help="run an ablation suite and print the grid")
    a.add_argument("--config", required=True, type=Path)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--suite", required=True, choices=sorted(SUITES))
    a.add_argument("--seeds", type=int, default=3, help="number of paired seeds, counted from the config seed")
    a.add_argument("--attr", help="attribute(s) to report (default: the config's fol_attribute)")
    a.add_argument("--dpd-mode", choices=DPD_MODES, default="standard")
    a.add_argument("--jobs", type=int, default=1, help="parallel variant processes")
    a.add_argument("--out", required=True, type=Path)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fairmoe: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, SchemaError, ContractError, OSError, ValueError, RuntimeError) as exc:
        print(f"fairmoe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
