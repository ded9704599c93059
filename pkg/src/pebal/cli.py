"""Command line: ``pebal {gen-data,pretrain,finetune,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 I/O or usage failure, 2 configuration error,
3 numerical failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .inference import BASELINES
from .losses import finite_diff_check
from .model import NumericalError, head_gradient_check, load_checkpoint, save_checkpoint

log = logging.getLogger("pebal")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


def _config(args):
    return load_config(args.config).with_seed(args.seed)


def _out_dir(path) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise FileNotFoundError(f"parent of output directory does not exist: {p.parent}")
    p.mkdir(exist_ok=True)
    return p


def _out_file(path) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {p.parent}")
    return p


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    with pipeline.output_lock(out):
        pipeline.gen_data(cfg, out)
    print(pipeline.manifest_summary(out))
    return EXIT_OK


def _train_outputs(out: Path, ckpt, result) -> None:
    save_checkpoint(out, ckpt)
    pipeline.write_trace(out.with_name(out.name + ".trace.tsv"), result.trace)
    print(f"wrote {out} (final loss {result.final_loss:.6g})")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_file(args.out)
    with pipeline.output_lock(out):
        ckpt, result = pipeline.pretrain(cfg, args.data)
        _train_outputs(out, ckpt, result)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out_file(args.out)
    pre = load_checkpoint(args.checkpoint)
    with pipeline.output_lock(out):
        ckpt, result = pipeline.finetune(cfg, args.data, pre)
        _train_outputs(out, ckpt, result)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    ckpt = load_checkpoint(args.checkpoint)
    if args.baseline == "pebal" and not ckpt.has_anomaly_class:
        log.warning("scoring a checkpoint without the anomaly class")
    run = pipeline.run_id(args.checkpoint, args.split, args.baseline, cfg.seed)
    with pipeline.output_lock(out):
        report, tau = pipeline.evaluate_to_dir(cfg, ckpt, args.data, args.split, out, args.baseline, run=run)
    for name, value, _ in report.rows():
        print(f"{name}\t{value:.6f}")
    print(f"tau\t{tau:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    with pipeline.output_lock(out):
        rows = pipeline.run_ablation(cfg, args.data)
        summary = pipeline.write_ablation(out, cfg, rows)
    for e in summary:
        print(f"{e['config']}\tAP {e['ap_mean']:.2f}±{e['ap_sd']:.2f}\tFPR95 {e['fpr95_mean']:.2f}±{e['fpr95_sd']:.2f}\t{e['status']}")
    return EXIT_OK if all(e["status"] == "ok" for e in summary) else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    loss = cfg.loss()
    logits = finite_diff_check(loss, trials=args.trials, seed=cfg.seed)
    head_err, _ = head_gradient_check(loss, trials=args.trials, seed=cfg.seed)
    print(f"logits\tmax_rel_err {logits.max_relative_error:.3e}\ttrials {logits.trials}\texcluded {logits.excluded}")
    print(f"head\tmax_rel_err {head_err:.3e}\ttrials {args.trials}")
    ok = logits.max_relative_error < GRADCHECK_TOLERANCE and head_err < GRADCHECK_TOLERANCE
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pebal", description="Energy-biased abstention learning for anomaly segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, data=True, out=True):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="run configuration file (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="override the configured seed")
        if data:
            s.add_argument("--data", required=True, help="benchmark directory written by gen-data")
        if out:
            s.add_argument("--out", required=True)
        s.set_defaults(func=func)
        return s

    add("gen-data", cmd_gen_data, "write the synthetic benchmark", data=False)
    add("pretrain", cmd_pretrain, "train the inlier head with cross-entropy")
    ft = add("finetune", cmd_finetune, "fine-tune a pretrained head with the PEBAL objective")
    ft.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    ev = add("eval", cmd_eval, "score a split and write maps and a report")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--baseline", default="pebal", choices=BASELINES)
    add("ablate", cmd_ablate, "train and score the ablation ladder")
    gc = add("gradcheck", cmd_gradcheck, "finite-difference check of loss gradients", data=False, out=False)
    gc.add_argument("--trials", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
