"""``entailrl`` command line: gen-data, pretrain, rl-train, eval, sweep."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, apply_preset, get_preset, load_config, render_config
from .mdp import ContractError
from .policy import NonFiniteError, PolicyParams, load_checkpoint, save_checkpoint
from .synthtask import generate_corpus, write_corpus
from .trainer import LOG_COLUMNS

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DIVERGED = 5
EXIT_CELL_FAILED = 6

log = logging.getLogger("entailrl")


def _common(p: argparse.ArgumentParser, preset: str | None = None) -> None:
    p.add_argument("--config", type=Path, help="INI config file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    if preset is not None:
        p.add_argument("--preset", default=preset, help="SL, Filtered, CTRL, RLEF_L or RLEF_H")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entailrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic corpus and vocabulary manifest")
    _common(p)

    p = sub.add_parser("pretrain", help="MLE-train an anchor (SL, Filtered or CTRL)")
    _common(p, "SL")
    p.add_argument("--data", type=Path, help="corpus directory from gen-data (generated in memory otherwise)")

    p = sub.add_parser("rl-train", help="fine-tune an anchor with the entailment + KL reward")
    _common(p, "RLEF_L")
    p.add_argument("--checkpoint", type=Path, required=True, help="anchor policy checkpoint")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("eval", help="decode a split and write metric reports")
    _common(p, "SL")
    p.add_argument("--checkpoint", type=Path, required=True, help="policy checkpoint")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("sweep", help="alpha x temperature x hidden-size x seed grid")
    _common(p)
    return parser


def _config(args, preset: str | None = None):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if preset is not None:
        cfg = apply_preset(cfg, preset)
    return cfg


def _load_policy(path: Path) -> PolicyParams:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    params, _ = load_checkpoint(path)
    if not isinstance(params, PolicyParams):
        raise ValueError(f"{path} holds {type(params).__name__}, expected a policy checkpoint")
    return params


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifest = write_corpus(args.out, generate_corpus(cfg.corpus))
    log.info("wrote corpus %s (%s)", args.out, manifest["splits"])
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, corpus = harness.load_corpus(_config(args, args.preset), args.data)
    res = harness.pretrain(cfg, corpus, args.preset)
    print(f"{args.preset}: trained on {res.n_examples} of {res.n_available} examples", file=sys.stderr)
    header = harness.header_line(cfg, preset=args.preset, n_examples=res.n_examples)
    harness.write_rows(args.out / "mle_log.csv", ("epoch", "train_ce", "val_ce"), res.history, header)
    meta = {"config_hash": cfg.hash(), "preset": args.preset, "n_examples": res.n_examples}
    save_checkpoint(args.out / "policy.npz", res.params, meta)
    (args.out / "config.ini").write_text(header + "\n" + render_config(cfg))
    return EXIT_OK


def cmd_rl_train(args) -> int:
    if not get_preset(args.preset).rl:
        raise ConfigError(f"rl-train needs an RL preset, got {args.preset}")
    cfg = _config(args, args.preset).override("train", rollout_workers=args.jobs)
    cfg, corpus = harness.load_corpus(cfg, args.data)
    anchor = _load_policy(args.checkpoint)
    header = harness.header_line(cfg, preset=args.preset)
    meta = {"config_hash": cfg.hash(), "preset": args.preset}

    def on_checkpoint(step, params, vparams):
        if step != cfg.train.total_steps:
            save_checkpoint(args.out / f"policy_step{step}.npz", params, {**meta, "step": step})

    res = harness.rl_train(cfg, corpus, anchor, on_checkpoint=on_checkpoint)
    harness.write_rows(args.out / "train_log.csv", LOG_COLUMNS, res.history, header)
    save_checkpoint(args.out / "policy.npz", res.params, meta)
    save_checkpoint(args.out / "value.npz", res.vparams, meta)
    (args.out / "config.ini").write_text(header + "\n" + render_config(cfg))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, corpus = harness.load_corpus(_config(args, args.preset), args.data)
    params = _load_policy(args.checkpoint)
    report = harness.write_eval_outputs(args.out, cfg, corpus, params, args.preset, checkpoint=args.checkpoint.name)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.override("sweep", seeds=(args.seed,))
    rows = harness.run_sweep(cfg, args.out, args.jobs)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.error("cell %s", r)
    print(f"{len(rows) - len(failed)} of {len(rows)} cells succeeded; results in {args.out / 'sweep.csv'}")
    return EXIT_CELL_FAILED if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "rl-train": cmd_rl_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
