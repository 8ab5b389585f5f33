"""Command-line entry points: train, eval, kshot, embed, plot, ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, RunConfig, ValidationError, dump_config, load_config, parse_overrides, seeded_rng

log = logging.getLogger("mixtask")

VARIANTS = {
    "single_gaussian": {"num_classes": 1, "latent_size": 32},
    "no_contrastive": {"use_contrastive": False},
    "posterior_sampling": {"bayes_adaptive": False},
    "trajectory_inference": {"online_inference": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Ablation variants are plain config mutations."""
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    return cfg.replace(**VARIANTS[variant])


def code_hash() -> str:
    """Git-style blob hash over the package sources, in sorted path order."""
    h = hashlib.sha1()
    root = Path(__file__).resolve().parent
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        h.update(str(path.relative_to(root)).encode() + b"\0")
        h.update(b"blob %d\0" % len(data) + data)
    return h.hexdigest()


def _add_common(p: argparse.ArgumentParser, out_required: bool = False):
    p.add_argument("--config", help="flat key: value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out-dir", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixtask", description="Mixture-latent meta-RL on point-robot task suites.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="meta-train and write a run directory")
    _add_common(p, out_required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epochs", type=int, help="stop after this many epochs (default: config)")

    p = sub.add_parser("ablate", help="train an ablation variant")
    _add_common(p, out_required=True)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epochs", type=int)

    for verb, help_text in [("eval", "zero-shot returns on the test split"),
                            ("kshot", "trajectory-level k-episode protocol"),
                            ("embed", "export per-step embeddings as TSV")]:
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--checkpoint", default="best", help="best, latest or a path")
        p.add_argument("--output", help="output file (default inside the run directory)")
        if verb == "kshot":
            p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("plot", help="render curves and embedding scatter")
    p.add_argument("--run", required=True)
    p.add_argument("--output", help="output directory (default: run directory)")
    return parser


def _config_for(args) -> RunConfig:
    cfg = load_config(args.config, parse_overrides(args.override))
    if getattr(args, "variant", None):
        cfg = apply_variant(cfg, args.variant)
    return cfg


def _prepare_run_dir(out: Path, cfg: RunConfig, resume: bool):
    if out.exists() and any(out.iterdir()) and not resume:
        raise FileExistsError(f"run directory {out} already exists; pass --resume to continue it")
    out.mkdir(parents=True, exist_ok=True)
    if resume and (out / "config.cfg").exists():
        saved = load_config(out / "config.cfg", use_env=False)
        if saved != cfg:
            raise ConfigError(f"config differs from the one stored in {out}")
    (out / "config.cfg").write_text(dump_config(cfg))
    manifest = {"code_hash": code_hash(), "config": cfg.to_dict(), "torch": torch.__version__,
                "numpy": np.__version__}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    from .trainer import Trainer
    cfg = _config_for(args)
    out = Path(args.out_dir)
    _prepare_run_dir(out, cfg, args.resume)
    trainer = Trainer(cfg, out, workers=args.workers)
    latest = out / "checkpoints" / "latest.pt"
    if args.resume and latest.exists():
        trainer.restore(latest)
        log.info("resumed at epoch %d", trainer.epoch)
    for report in trainer.train(args.epochs):
        print(json.dumps(report.metrics_record()), flush=True)
    return 0


def _load_run(args):
    from .trainer import snapshot_from_checkpoint
    run = Path(args.run)
    cfg = load_config(run / "config.cfg", use_env=False)
    ckpt = Path(args.checkpoint)
    if args.checkpoint in ("best", "latest"):
        ckpt = run / "checkpoints" / f"{args.checkpoint}.pt"
        if not ckpt.exists():
            ckpt = run / "checkpoints" / "latest.pt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    return run, cfg, snapshot_from_checkpoint(ckpt, cfg)


def _test_tasks(cfg: RunConfig):
    from .envs import SUITES, sample_tasks
    dist = SUITES[cfg.env]
    task_rng = seeded_rng(cfg.seed, "tasks")
    sample_tasks(dist, cfg.n_train_tasks, "train", task_rng)  # advance the stream exactly as training did
    return sample_tasks(dist, cfg.n_eval_tasks, "test", task_rng)


def cmd_eval(args) -> int:
    from .trainer import baseline_returns, evaluate_zero_shot, normalized_score
    run, cfg, snap = _load_run(args)
    tasks = _test_tasks(cfg)
    returns, _ = evaluate_zero_shot(tasks, snap, cfg.seed)
    oracle, zero = baseline_returns(tasks, cfg, cfg.seed)
    result = {"returns": returns.tolist(), "return_mean": float(np.mean(returns)),
              "return_std": float(np.std(returns)), "oracle_mean": float(np.mean(oracle)),
              "zero_mean": float(np.mean(zero)), "score": normalized_score(returns, oracle, zero)}
    if not all(np.isfinite(returns)):
        raise FloatingPointError("non-finite evaluation return")
    Path(args.output or run / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps({k: v for k, v in result.items() if k != "returns"}))
    return 0


def cmd_kshot(args) -> int:
    from .core import torch_generator
    from .trainer import evaluate_k_shot
    run, cfg, snap = _load_run(args)
    tasks = _test_tasks(cfg)
    rows = []
    for i, task in enumerate(tasks):
        rets = evaluate_k_shot(task, args.k, snap, seeded_rng(cfg.seed, f"kshot/{i}"),
                               torch_generator(cfg.seed, f"kshot/{i}"))
        rows.append(rets.tolist())
    result = {"k": args.k, "returns": rows, "episode_means": np.mean(rows, axis=0).tolist()}
    Path(args.output or run / "kshot.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps({"k": args.k, "episode_means": result["episode_means"]}))
    return 0


def cmd_embed(args) -> int:
    from .trainer import export_embeddings
    run, cfg, snap = _load_run(args)
    path = Path(args.output or run / "embeddings.tsv")
    _, rows, _ = export_embeddings(_test_tasks(cfg), snap, path, cfg.seed)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    out = Path(args.output or run)
    out.mkdir(parents=True, exist_ok=True)
    metrics = run / "metrics.jsonl"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics file in {run}")
    recs = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
    steps = [r["env_steps_total"] for r in recs]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(steps, [r["eval_return_mean"] for r in recs])
    axes[0].set_xlabel("environment steps")
    axes[0].set_ylabel("zero-shot return")
    axes[1].plot(steps, [r["vae_loss"] for r in recs], label="vae")
    if any(r["contrastive_loss"] is not None for r in recs):
        axes[1].plot(steps, [np.nan if r["contrastive_loss"] is None else r["contrastive_loss"] for r in recs],
                     label="contrastive")
    axes[1].set_yscale("symlog")
    axes[1].set_xlabel("environment steps")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png")
    plt.close(fig)
    written = ["curves.png"]

    emb = run / "embeddings.tsv"
    if emb.exists():
        with open(emb) as fh:
            header = fh.readline().rstrip("\n").split("\t")
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        col = {name: i for i, name in enumerate(header)}
        labels = [r[col["base_task"]] for r in rows]
        pc = np.array([[float(r[col["pc1"]]), float(r[col["pc2"]])] for r in rows])
        fig, ax = plt.subplots(figsize=(5, 5))
        for name in sorted(set(labels)):
            sel = np.array([lab == name for lab in labels])
            ax.scatter(pc[sel, 0], pc[sel, 1], s=2, label=name)
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
        ax.legend(markerscale=4)
        fig.tight_layout()
        fig.savefig(out / "embeddings.png")
        plt.close(fig)
        written.append("embeddings.png")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return 0


COMMANDS = {"train": cmd_train, "ablate": cmd_train, "eval": cmd_eval, "kshot": cmd_kshot,
            "embed": cmd_embed, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"mixtask: error: {err}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, ValidationError) as err:
        print(f"mixtask: config error: {err}", file=sys.stderr)
        return 1
    except UsageError as err:
        print(f"mixtask: error: {err}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, FloatingPointError) as err:
        print(f"mixtask: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
