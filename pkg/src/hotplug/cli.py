"""Command-line surface: data generation, pretraining, compatibility
training, evaluation, and verification suites.

Exit codes: 0 success (and ordering holds), 2 usage/config error,
3 ordering failed or verification failed, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import config as cfg_mod
from . import verify
from .data import generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, FormatError, HotplugError, ParameterError
from .evaluation import hot_plug_report, raw_swap_baseline
from .training import load_checkpoint, pretrain_clip, save_checkpoint, train_taca

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ORDERING = 3
EXIT_IO = 4

# Pretraining seeds are offset per role so the two latent spaces genuinely
# differ; the new encoder also gets a longer step budget.
NEW_ROLE_SEED_OFFSET = 1000


def _load_config(path):
    return cfg_mod.load_config(path) if path else cfg_mod.resolve_config()


def cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    if args.n is not None:
        config["data"]["n"] = args.n
    if args.seed is not None:
        config["data"]["seed"] = args.seed
    digest = cfg_mod.config_digest(config)
    if config["data"]["n"] < 1:
        raise ConfigError("--n must be >= 1")
    dataset = generate_dataset(config["data"]["n"], config["data"]["seed"],
                               cfg_mod.image_spec_from(config),
                               config_digest=digest)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out} (digest {digest[:12]})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    digest = cfg_mod.config_digest(config)
    dataset = load_dataset(args.data)
    visual_cfg = cfg_mod.visual_config_from(config, args.role)
    text_cfg = cfg_mod.text_config_from(config, args.role)
    steps = config[f"{args.role}_encoder"]["pretrain_steps"]
    seed = config["train"]["seed"]
    if args.role == "new":
        seed += NEW_ROLE_SEED_OFFSET
    if args.seed is not None:
        seed = args.seed
    train_cfg = cfg_mod.train_config_from(config, steps=steps, seed=seed)
    ckpt = pretrain_clip(visual_cfg, text_cfg, dataset, train_cfg,
                         config_digest=digest)
    save_checkpoint(ckpt, args.out)
    print(f"pretrained {args.role} encoder: final loss "
          f"{ckpt.meta['final_loss']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_train_taca(args) -> int:
    config = _load_config(args.config)
    digest = cfg_mod.config_digest(config)
    dataset = load_dataset(args.data)
    old_ckpt = load_checkpoint(args.old)
    new_ckpt = load_checkpoint(args.new)
    taca_cfg = cfg_mod.taca_config_from(config)
    train_cfg = cfg_mod.train_config_from(config, taca=True)
    try:
        ckpt, log = train_taca(old_ckpt, new_ckpt, taca_cfg, dataset,
                               train_cfg, config_digest=digest)
    except ConfigError as exc:
        d_old = old_ckpt.meta.get("visual_config", {}).get("embed_dim")
        d_new = new_ckpt.meta.get("visual_config", {}).get("embed_dim")
        raise ConfigError(f"{exc} (old embed_dim={d_old}, new embed_dim={d_new})")
    save_checkpoint(ckpt, args.out)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total", "contrastive", "distillation"])
            writer.writerows(log)
    print(f"trained attachment: loss {log[0][1]:.4f} -> {log[-1][1]:.4f} "
          f"over {len(log)} steps -> {args.out}")
    return EXIT_OK


def _check_digests(old_ckpt, new_ckpt, taca_ckpt, force: bool):
    pairs = [("old", old_ckpt, "old_checkpoint_digest")]
    if new_ckpt is not None:
        pairs.append(("new", new_ckpt, "new_checkpoint_digest"))
    for label, ckpt, key in pairs:
        recorded = taca_ckpt.meta.get(key, "")
        actual = ckpt.meta.get("config_digest", "")
        if recorded and actual and recorded != actual:
            msg = (f"{label} checkpoint digest {actual[:12]} does not match the "
                   f"digest recorded at attachment training time {recorded[:12]}")
            if not force:
                raise ConfigError(msg + " (use --force to override)")
            print(f"warning: {msg}", file=sys.stderr)


def cmd_eval_compat(args) -> int:
    config = _load_config(args.config)
    dataset = load_dataset(args.data)
    old_ckpt = load_checkpoint(args.old)
    taca_ckpt = load_checkpoint(args.taca)
    new_ckpt = load_checkpoint(args.new_cold) if args.new_cold else None
    _check_digests(old_ckpt, new_ckpt, taca_ckpt, args.force)
    report = hot_plug_report(
        old_ckpt, taca_ckpt, new_ckpt, dataset, args.task,
        k=config["eval"]["k"], head_seeds=tuple(config["eval"]["head_seeds"]))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
    print(f"{report.task} ({report.metric}): "
          f"old={report.m_old_old:.4f} hot-plug={report.m_old_new:.4f} "
          f"cold-plug={'-' if report.m_new_new is None else f'{report.m_new_new:.4f}'} "
          f"left_ok={report.left_ok}")
    return EXIT_OK if report.left_ok else EXIT_ORDERING


def cmd_verify(args) -> int:
    if args.suite == "gradcheck":
        results = verify.run_gradcheck_suite()
        fmt = lambda value: f"max_rel_err={value:.3e}"
    elif args.suite == "params":
        results = verify.run_params_suite()
        fmt = lambda value: f"exact_count={value}"
    else:
        results = verify.run_losses_suite()
        fmt = lambda value: f"value={value:.9f}"
    all_ok = True
    for name, value, ok in results:
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name} {fmt(value)}")
    return EXIT_OK if all_ok else EXIT_ORDERING


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hotplug",
        description="Hot-pluggable encoder upgrades with compatible adapters")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastively pretrain an encoder pair")
    p.add_argument("--role", choices=["old", "new"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-taca",
                       help="train the compatibility attachment on a frozen new encoder")
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_taca)

    p = sub.add_parser("eval-compat", help="emit the compatibility-ordering report")
    p.add_argument("--old", required=True)
    p.add_argument("--taca", required=True)
    p.add_argument("--new-cold", dest="new_cold")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["retrieval", "classification"],
                   required=True)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--force", action="store_true",
                   help="proceed despite config-digest mismatches")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval_compat)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("--suite", choices=["gradcheck", "params", "losses"],
                   required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HotplugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
