"""Command-line entry point: gen-data, train, infer, eval, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .datagen import DatasetError, Episode, dataset_checksum, generate_dataset, load_all, load_dataset, write_dataset
from .diffcore import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
RESOLVED = "config.resolved.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _config_for_checkpoint(args, ckpt: Path) -> RunConfig:
    """Explicit --config wins, else the resolved config written by train."""
    if args.config:
        return load_config(args.config)
    beside = ckpt.parent / RESOLVED
    return load_config(beside if beside.is_file() else None)


def _judge(cfg: RunConfig):
    from .evalx import SubprocessJudge, TemplateJudge

    return SubprocessJudge(cfg.judge_command) if cfg.judge_command else TemplateJudge()


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    data = generate_dataset(cfg.manifest())
    write_dataset(data, cfg.manifest(), out)
    cfg.write(out / RESOLVED)
    print(f"wrote {sum(len(v) for v in data.values())} episodes to {out}  sha256 {dataset_checksum(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import run_training

    cfg = load_config(args.config)
    data = load_all(_need_dir(args.data, "data"))
    out = Path(args.out)
    tc = cfg.train_config(args.ablation)
    cfg = dataclasses.replace(cfg, train=tc)

    def progress(phase, epoch, epochs, trainer):
        rec = trainer.records[-1]
        print(f"{phase} epoch {epoch}/{epochs}  step {rec.step}  bce {rec.loss_bce:.4f}", flush=True)

    res = run_training(tc, data, out, cfg.model, progress=None if args.quiet else progress)
    cfg.write(out / RESOLVED)
    print(f"checkpoint {res.checkpoints[-1]}  sha256 {res.policy.params.checksum()}")
    return EXIT_OK


def _load_policy(cfg: RunConfig, ckpt: Path):
    from .model import Policy

    return Policy.load(ckpt, cfg.model)


def cmd_infer(args) -> int:
    from .refine import refine_inference

    ckpt = _need_file(args.checkpoint, "checkpoint")
    cfg = _config_for_checkpoint(args, ckpt)
    if args.episode:
        path = _need_file(args.episode, "episode file")
        try:
            ep = Episode.from_record(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: not an episode record ({exc})") from None
        ep.validate()
    else:
        eps = load_dataset(_need_dir(args.data, "data"), args.split)
        if not 0 <= args.index < len(eps):
            raise ConfigError(f"--index {args.index} out of range for {len(eps)} episodes")
        ep = eps[args.index]
    icfg = cfg.infer_config(T_refine=args.rounds, M=args.samples)
    policy = _load_policy(cfg, ckpt)
    res = refine_inference(ep.frames, policy, icfg, key=ep.episode_id)
    reasoning = " ".join(policy.vocab.decode(res.reasoning[:-1] if res.reasoning[-1:] == (policy.vocab.eos,) else res.reasoning))
    print(f"{ep.episode_id}: detection={res.det_label}  reasoning: {reasoning}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump = res.to_dict(policy.vocab)
    dump["episode_id"] = ep.episode_id
    (out / f"diagnostics_{ep.episode_id}.json").write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
    dataclasses.replace(cfg, infer=icfg).write(out / RESOLVED)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalx import run_eval
    from .evalx.report import metrics_table, plot_round_curves, write_json

    ckpt = _need_file(args.checkpoint, "checkpoint")
    cfg = _config_for_checkpoint(args, ckpt)
    test = load_dataset(_need_dir(args.data, "data"), "test")
    policy = _load_policy(cfg, ckpt)
    judge = _judge(cfg)
    try:
        rep, results = run_eval(policy, test, cfg.infer_config(), judge)
    finally:
        if hasattr(judge, "close"):
            judge.close()
    out = Path(args.report)
    write_json(rep.to_dict(), out / "metrics.json")
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for ep, r in zip(test, results):
            d = r.to_dict(policy.vocab)
            d["episode_id"] = ep.episode_id
            fh.write(json.dumps(d) + "\n")
    plot_round_curves([dataclasses.asdict(p) for p in rep.curves], out / "round_curves.png")
    table = metrics_table(rep)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    cfg.write(out / RESOLVED)
    print(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evalx import Campaign, cells_from, run_ablations, run_ratio_sweep
    from .evalx.report import ablation_table, plot_ablation, plot_ratio, plot_round_curves, ratio_table, write_json

    cfg = load_config(args.config)
    ex = cfg.experiment
    camp = Campaign(
        seeds=tuple(ex.seeds),
        manifest=cfg.manifest(),
        train=cfg.train,
        model=cfg.model,
        infer=cfg.infer,
        ratios=tuple(ex.ratios),
    )
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED)
    workers = args.workers or ex.workers
    ckpt_dir = out if args.keep_checkpoints else None
    abl = None
    if args.grid in ("ablation", "all"):
        abl = run_ablations(camp, ckpt_dir, workers)
        write_json(abl, out / "ablation.json")
        text = ablation_table(abl)
        (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
        plot_ablation(abl, out / "ablation.png")
        plot_round_curves(abl["round_curves"], out / "round_curves.png", "full method, mean ± std over seeds")
        print(text)
    if args.grid in ("ratio", "all"):
        reuse = []
        if abl is not None:
            reuse = [c for c in cells_from(abl) if c.variant == "full"]
        rat = run_ratio_sweep(camp, ckpt_dir, workers, reuse)
        write_json(rat, out / "ratio.json")
        text = ratio_table(rat)
        (out / "ratio.txt").write_text(text + "\n", encoding="utf-8")
        plot_ratio(rat, out / "ratio.png")
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roundrefine", description="Multi-task failure detection and reasoning with iterative refinement.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=["full", "multitask_only", "refinement_only", "offline_only", "online_only"])
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="refine a single episode")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--episode", help="JSON file holding one episode record")
    src.add_argument("--data", help="dataset directory")
    i.add_argument("--split", default="test", choices=["sparse", "dense", "test"])
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--rounds", type=int)
    i.add_argument("--samples", type=int)
    i.add_argument("--out", required=True, help="directory for the diagnostics dump")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid and/or ratio sweep")
    a.add_argument("--config")
    a.add_argument("--grid", choices=["ablation", "ratio", "all"], default="all")
    a.add_argument("--report", required=True)
    a.add_argument("--workers", type=int)
    a.add_argument("--keep-checkpoints", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
