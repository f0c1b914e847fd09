"""Command-line entry point: `prefassess <command> [options]`.

Every command prints the resolved config hash and seed first, so any run
can be replayed with `--config` plus the same flags. Outputs are never
overwritten; pick a fresh path for each run.

Exit status: 0 success, 2 usage or config error, 3 input/data error,
4 backend error (unconfigured adapter, failed render), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, dump_config, load_config

logger = logging.getLogger("prefassess")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3, 4


class CLIError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _fresh(path: str | Path) -> Path:
    p = Path(path)
    if p.exists() and (p.is_file() or any(p.iterdir())):
        raise CLIError("io", f"{p} already exists; artifacts are append-only, choose a new path", EXIT_DATA)
    return p


def _need(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("input", f"{what} not found: {p}", EXIT_DATA)
    return p


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .pipeline import Runtime, gen_data

    out = _fresh(args.out)
    gen_data(Runtime.from_config(cfg), out, cfg.seed)
    print(f"wrote {cfg.data.n_users} users to {out}")
    return EXIT_OK


def cmd_annotate(args, cfg: RunConfig) -> int:
    from .pipeline import Runtime, annotate

    out = _fresh(args.out)
    annotate(Runtime.from_config(cfg), _need(args.data, "dataset directory"), out, cfg.seed)
    print(f"wrote annotations to {out}")
    return EXIT_OK


def cmd_filter(args, cfg: RunConfig) -> int:
    from .pipeline import Runtime, filter_annotations

    out = _fresh(args.out)
    counts = filter_annotations(
        Runtime.from_config(cfg), _need(args.data, "dataset directory"), _need(args.annotations, "annotations"), out
    )
    print(f"accepted {counts['accepted']} rejected {counts['rejected']} -> {out}")
    return EXIT_OK


def cmd_train_sft(args, cfg: RunConfig) -> int:
    from .pipeline import Runtime, new_policy, run_sft, sft_dataset
    from .trainer import save_checkpoint

    out, log_path = _fresh(args.out), _fresh(args.log)
    rt = Runtime.from_config(cfg)
    policy = new_policy(rt)
    rows = sft_dataset(rt, policy, _need(args.data, "dataset directory"), _need(args.filtered, "filtered annotations"))
    if not rows:
        raise CLIError("input", "no accepted annotations to train on", EXIT_DATA)
    log = run_sft(rt, policy, rows, cfg.seed)
    log.write(log_path)
    save_checkpoint(out, policy, cfg.config_hash())
    print(f"sft on {len(rows)} rows, final loss {log.records[-1]['loss']:.4f} -> {out}")
    return EXIT_OK


def cmd_train_grpo(args, cfg: RunConfig) -> int:
    from .datagen import load_dataset
    from .pipeline import Runtime, load_policy, new_policy, run_grpo, training_samples
    from .trainer import SampleView, save_checkpoint

    out, log_path = _fresh(args.out), _fresh(args.log)
    rt = Runtime.from_config(cfg)
    data = _need(args.data, "dataset directory")
    policy = load_policy(rt, _need(args.init, "initial checkpoint")) if args.init else new_policy(rt)
    train = training_samples(load_dataset(data / "dataset.jsonl"))
    contexts = [SampleView.from_sample(s, data) for s in train]
    reward_cfg = replace(cfg.reward, w_p=0.0) if args.no_prediction_reward else cfg.reward
    log = run_grpo(rt, policy, contexts, cfg.seed, reward_cfg)
    log.write(log_path)
    save_checkpoint(out, policy, cfg.config_hash())
    last = log.records[-1] if log.records else {}
    print(f"grpo {len(log.records)} steps, last mean reward {last.get('mean_reward', float('nan')):.3f} -> {out}")
    return EXIT_OK


def _assessor(args, rt, root: Path):
    from .evaluation import OracleAssessor, PolicyAssessor, RandomAssessor
    from .pipeline import load_policy

    if args.assessor == "oracle":
        return OracleAssessor(rt.cfg.seed)
    if args.assessor == "random":
        return RandomAssessor(rt.vocab, rt.cfg.seed)
    if not args.checkpoint:
        raise CLIError("usage", "--assessor policy requires --checkpoint", EXIT_USAGE)
    return PolicyAssessor(load_policy(rt, _need(args.checkpoint, "checkpoint")), root, rt.cfg.eval.temperature)


def _bench(args, rt) -> tuple[list, Path]:
    from .datagen import load_dataset
    from .pipeline import benchmark, training_samples

    bench_dir = Path(args.bench)
    if (bench_dir / "dataset.jsonl").exists():
        return load_dataset(bench_dir / "dataset.jsonl"), bench_dir
    if not args.train_data:
        raise CLIError("input", f"no benchmark at {bench_dir}; pass --train-data to build one", EXIT_DATA)
    _fresh(bench_dir)
    train = training_samples(load_dataset(_need(args.train_data, "training data") / "dataset.jsonl"))
    return benchmark(rt, bench_dir, train, rt.cfg.seed), bench_dir


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate, render_report
    from .pipeline import Runtime

    rt = Runtime.from_config(cfg)
    out = _fresh(args.out)
    samples, root = _bench(args, rt)
    report = evaluate(
        _assessor(args, rt, root), samples, rt.backends.text_sim, cfg.eval.tau, jobs=cfg.jobs,
        config_hash=cfg.config_hash(),
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(render_report(report, "csv"))
    (out / "report_plot.csv").write_text(render_report(report, "plot-data"))
    table = render_report(report, "text-table")
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_sweep_refs(args, cfg: RunConfig) -> int:
    from .evaluation import render_sweep, robustness_sweep
    from .pipeline import Runtime

    rt = Runtime.from_config(cfg)
    out = _fresh(args.out)
    samples, root = _bench(args, rt)
    rows = robustness_sweep(_assessor(args, rt, root), samples, args.k, rt.backends.text_sim, jobs=cfg.jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.csv").write_text(render_sweep(rows, "csv"))
    (out / "robustness_plot.csv").write_text(render_sweep(rows, "plot-data"))
    table = render_sweep(rows, "text-table")
    (out / "robustness.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .evaluation import ABLATION_VARIANTS, ablation_run, render_ablation
    from .pipeline import ablation_variant

    out = _fresh(args.out)
    wanted = args.variants.split(",") if args.variants else [v.name for v in ABLATION_VARIANTS]
    by_name = {v.name: v for v in ABLATION_VARIANTS}
    unknown = [w for w in wanted if w not in by_name]
    if unknown:
        raise CLIError("usage", f"unknown variant(s) {unknown}; choose from {sorted(by_name)}", EXIT_USAGE)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_run(
        [by_name[w] for w in wanted], args.seeds, lambda v, s: ablation_variant(cfg, v, s, out / f"seed{s}")
    )
    (out / "ablation.csv").write_text(render_ablation(rows, "csv"))
    table = render_ablation(rows, "text-table")
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_reward(args, cfg: RunConfig) -> int:
    from .datagen import UserSample
    from .pipeline import Runtime
    from .reward import debug_record, total_reward

    rt = Runtime.from_config(cfg)
    text = _need(args.response, "response file").read_text("utf-8")
    try:
        sample = UserSample.from_row(json.loads(_need(args.sample, "sample file").read_text("utf-8")))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CLIError("input", f"{args.sample}: not a dataset row ({exc})", EXIT_DATA) from exc
    breakdown = total_reward(text, sample, cfg.reward, rt.backends)
    print(debug_record(breakdown, sample, cfg.reward))
    return EXIT_OK


def cmd_personalize(args, cfg: RunConfig) -> int:
    from .cot import try_parse
    from .datagen import UserSample, recaption
    from .pipeline import Runtime

    rt = Runtime.from_config(cfg)
    sample = UserSample.from_row(json.loads(_need(args.sample, "sample file").read_text("utf-8")))
    root = Path(args.root) if args.root else Path(args.sample).parent
    text = _assessor(args, rt, root).assess(sample, sample.k_refs)
    parsed = try_parse(text, "lenient")
    if parsed is None or not parsed.predicted_preferences:
        raise CLIError("model", "assessor did not produce a usable preference profile", EXIT_DATA)
    profile = parsed.predicted_preferences[0]
    prompt = recaption(args.prompt, profile)
    print(json.dumps({"predicted_profile": profile.as_dict(), "prompt": prompt}, indent=2))
    if args.render:
        png = _fresh(args.render)
        rt.backends.t2i.render(prompt, cfg.seed).to_png(png)
        print(f"rendered {png}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file of flat dotted keys")
    common.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--jobs", type=int, help="parallelism bound for rendering, annotation and eval")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="prefassess", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic user dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of users (data.n_users)")
    p.add_argument("--multi-fraction", type=float)
    p.add_argument("--k-refs", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("annotate", parents=[common], help="annotate training users with CoT responses")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotator", choices=("oracle", "remote"))
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("filter", parents=[common], help="accept consistent, correct annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-sft", parents=[common], help="cold-start supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--filtered", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log", required=True, help="JSONL training log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_sft)

    p = sub.add_parser("train-grpo", parents=[common], help="group-relative policy optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="starting checkpoint (SFT); omit to start untrained")
    p.add_argument("--out", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-prediction-reward", action="store_true", help="train with w_p = 0")
    p.set_defaults(func=cmd_train_grpo)

    def assessor_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--assessor", choices=("oracle", "random", "policy"), default="policy")
        p.add_argument("--checkpoint")
        p.add_argument("--bench", required=True, help="benchmark directory (built if missing)")
        p.add_argument("--train-data", help="training dataset whose profiles define the seen splits")
        p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="assessment and profile-prediction accuracy per split")
    assessor_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-refs", parents=[common], help="accuracy versus number of visible references")
    assessor_flags(p)
    p.add_argument("--k", type=_ints, default=[1, 2, 3, 4, 5], help="comma-separated k values")
    p.set_defaults(func=cmd_sweep_refs)

    p = sub.add_parser("ablate", parents=[common], help="train and compare SFT/RL/PR variants")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--variants", help="comma-separated subset of base,sft,rl,sft+rl,sft+rl+pr")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("reward", parents=[common], help="debug breakdown of one response's reward")
    p.add_argument("--response", required=True, help="text file holding the response")
    p.add_argument("--sample", required=True, help="JSON file holding one dataset row")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("personalize", parents=[common], help="predict a profile and recaption a prompt with it")
    p.add_argument("--sample", required=True)
    p.add_argument("--root", help="image root for the sample (default: the sample file's directory)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--assessor", choices=("oracle", "policy"), default="policy")
    p.add_argument("--checkpoint")
    p.add_argument("--render", help="write a PNG of the recaptioned prompt here")
    p.set_defaults(func=cmd_personalize)
    return parser


_FLAG_KEYS = {
    "n": "data.n_users",
    "multi_fraction": "data.multi_fraction",
    "k_refs": "data.k_refs",
    "annotator": "backends.annotator",
    "tau": "filter.tau",
    "epochs": "sft.epochs",
    "lr": "sft.learning_rate",
    "steps": "train.steps",
    "seed": "seed",
    "jobs": "jobs",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = dict(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"config_hash={cfg.config_hash()} seed={cfg.seed}")
    if args.verbose:
        print(dump_config(cfg), end="")
    try:
        return args.func(args, cfg)
    except CLIError as exc:
        print(f"error[{exc.category}] {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (NotImplementedError, RuntimeError) as exc:
        print(f"error[backend] {args.command}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error[data] {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"error[internal] {args.command}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
