"""Pipeline stages wired from a RunConfig; shared by the CLI and the end-to-end tests.

Artifacts (all under caller-chosen paths, never rewritten by later stages):

    data/dataset.jsonl, data/img/, data/manifest.json   gen-data
    annotations.jsonl                                   annotate (verdict "pending")
    filtered.jsonl                                      filter (verdicts filled)
    sft.npz, sft_log.jsonl                              train-sft
    grpo.npz, grpo_log.jsonl                            train-grpo
    report.csv / report.txt, bench/                     eval
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .cot import OracleAnnotator, RemoteAnnotator, annotate_samples, filter_response, read_annotations, write_annotations
from .datagen import MockT2IBackend, RemoteT2IBackend, UserSample, derive_seed, generate_dataset, load_dataset, load_prompts
from .evaluation import BenchmarkSpec, MetricsReport, PolicyAssessor, build_benchmark, evaluate
from .profile import Vocabulary, load_vocabulary
from .reward import RewardBackends, RewardConfig, total_reward
from .similarity import MockImageSimilarity, MockTextSimilarity, SentenceEmbeddingSimilarity
from .trainer import (
    GRPOConfig,
    SampleView,
    TinyLMPolicy,
    TrainingLog,
    Trajectory,
    load_checkpoint,
    save_checkpoint,
    train_grpo,
    train_sft,
)

logger = logging.getLogger(__name__)

TRAIN_SPLITS = ("seen-SP", "seen-MP")


@dataclass
class Runtime:
    cfg: RunConfig
    vocab: Vocabulary
    backends: RewardBackends

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Runtime":
        vocab = load_vocabulary(cfg.paths.vocab or None)
        if cfg.backends.t2i == "mock":
            t2i = MockT2IBackend(vocab)
        elif cfg.backends.t2i == "remote":
            t2i = RemoteT2IBackend(cfg.backends.t2i_endpoint)
        else:
            raise ValueError(f"unknown t2i backend {cfg.backends.t2i!r}")
        if cfg.backends.text_sim == "mock":
            text_sim = MockTextSimilarity(vocab)
        elif cfg.backends.text_sim == "sentence":
            text_sim = SentenceEmbeddingSimilarity()
        else:
            raise ValueError(f"unknown text similarity backend {cfg.backends.text_sim!r}")
        return cls(cfg, vocab, RewardBackends(t2i, text_sim, MockImageSimilarity()))

    def prompts(self) -> list[str]:
        return load_prompts(self.cfg.paths.prompts or None)


def gen_data(rt: Runtime, out_dir: str | Path, seed: int | None = None) -> Path:
    c = rt.cfg
    generate_dataset(
        rt.vocab, c.data.n_users, c.data.multi_fraction, c.data.k_refs, rt.backends.t2i,
        c.seed if seed is None else seed, out_dir, prompts=rt.prompts(),
        unseen_fraction=c.data.unseen_fraction, reserved_fraction=c.data.reserved_fraction, jobs=c.jobs,
    )
    return Path(out_dir)


def training_samples(samples: Sequence[UserSample]) -> list[UserSample]:
    return [s for s in samples if s.split in TRAIN_SPLITS]


def annotate(rt: Runtime, data_dir: str | Path, out_path: str | Path, seed: int | None = None) -> Path:
    samples = training_samples(load_dataset(Path(data_dir) / "dataset.jsonl"))
    if rt.cfg.backends.annotator == "oracle":
        client = OracleAnnotator(rt.cfg.seed if seed is None else seed)
    elif rt.cfg.backends.annotator == "remote":
        client = RemoteAnnotator(rt.cfg.backends.annotator_model)
    else:
        raise ValueError(f"unknown annotator {rt.cfg.backends.annotator!r}")
    responses = annotate_samples(samples, client, jobs=rt.cfg.jobs)
    write_annotations(out_path, samples, responses)
    return Path(out_path)


def filter_annotations(rt: Runtime, data_dir: str | Path, ann_path: str | Path, out_path: str | Path) -> dict[str, int]:
    by_id = {s.user_id: s for s in load_dataset(Path(data_dir) / "dataset.jsonl")}
    rows = read_annotations(ann_path)
    samples = [by_id[r["user_id"]] for r in rows]
    texts = [r["response_text"] for r in rows]
    verdicts = [filter_response(t, s, rt.backends.text_sim, rt.cfg.filter.tau) for t, s in zip(texts, samples)]
    write_annotations(out_path, samples, texts, verdicts)
    return {"accepted": sum(v.accepted for v in verdicts), "rejected": sum(not v.accepted for v in verdicts)}


def sft_dataset(rt: Runtime, policy: TinyLMPolicy, data_dir: str | Path, filtered_path: str | Path) -> list[tuple[SampleView, list[int]]]:
    by_id = {s.user_id: s for s in load_dataset(Path(data_dir) / "dataset.jsonl")}
    rows = []
    for r in read_annotations(filtered_path):
        if r["verdict"] != "accepted":
            continue
        view = SampleView.from_sample(by_id[r["user_id"]], data_dir)
        rows.append((view, policy.tokenize(r["response_text"])))
    return rows


def new_policy(rt: Runtime) -> TinyLMPolicy:
    return TinyLMPolicy(rt.vocab)


def run_sft(
    rt: Runtime, policy: TinyLMPolicy, rows: Sequence[tuple[SampleView, list[int]]], seed: int
) -> TrainingLog:
    c = rt.cfg.sft
    return train_sft(policy, rows, c.epochs, c.learning_rate, np.random.default_rng(derive_seed(seed, 11)), c.batch_size)


def reward_fn(rt: Runtime, reward_cfg: RewardConfig | None = None):
    cfg = reward_cfg or rt.cfg.reward

    def fn(ctx: SampleView, traj: Trajectory) -> float:
        return total_reward(traj.text, ctx.sample, cfg, rt.backends).total

    return fn


def run_grpo(
    rt: Runtime,
    policy: TinyLMPolicy,
    contexts: Sequence[SampleView],
    seed: int,
    reward_cfg: RewardConfig | None = None,
    grpo_cfg: GRPOConfig | None = None,
    steps: int | None = None,
) -> TrainingLog:
    ref = policy.clone_frozen()
    return train_grpo(
        policy, ref, contexts, reward_fn(rt, reward_cfg), grpo_cfg or rt.cfg.grpo,
        rt.cfg.train.steps if steps is None else steps, np.random.default_rng(derive_seed(seed, 12)),
    )


def benchmark(rt: Runtime, out_dir: str | Path, train_samples: Sequence[UserSample], seed: int) -> list[UserSample]:
    e = rt.cfg.eval
    spec = BenchmarkSpec(e.split_sizes(), e.k_refs, derive_seed(seed, e.seed_offset))
    pool = [s.profile_set for s in train_samples]
    return build_benchmark(spec, rt.vocab, rt.backends.t2i, out_dir, seen_pool=pool, jobs=rt.cfg.jobs)


def evaluate_policy(
    rt: Runtime, policy: TinyLMPolicy, bench: Sequence[UserSample], bench_dir: str | Path, k: int | None = None
) -> MetricsReport:
    assessor = PolicyAssessor(policy, bench_dir, rt.cfg.eval.temperature)
    return evaluate(assessor, bench, rt.backends.text_sim, rt.cfg.eval.tau, k_visible=k, config_hash=rt.cfg.config_hash())


@dataclass
class PipelineResult:
    untrained: MetricsReport
    sft: MetricsReport
    final: MetricsReport
    sft_log: TrainingLog
    grpo_log: TrainingLog
    workdir: Path


def run_pipeline(cfg: RunConfig, workdir: str | Path, seed: int | None = None) -> PipelineResult:
    """gen-data -> annotate -> filter -> train-sft -> train-grpo -> eval, all under `workdir`."""
    seed = cfg.seed if seed is None else seed
    rt = Runtime.from_config(cfg)
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = gen_data(rt, work / "data", seed)
    annotate(rt, data, work / "annotations.jsonl", seed)
    filter_annotations(rt, data, work / "annotations.jsonl", work / "filtered.jsonl")

    policy = new_policy(rt)
    rows = sft_dataset(rt, policy, data, work / "filtered.jsonl")
    train = training_samples(load_dataset(data / "dataset.jsonl"))
    bench = benchmark(rt, work / "bench", train, seed)
    untrained = evaluate_policy(rt, policy, bench, work / "bench")

    sft_log = run_sft(rt, policy, rows, seed)
    sft_log.write(work / "sft_log.jsonl")
    save_checkpoint(work / "sft.npz", policy, cfg.config_hash())
    after_sft = evaluate_policy(rt, policy, bench, work / "bench")

    contexts = [SampleView.from_sample(s, data) for s in train]
    grpo_log = run_grpo(rt, policy, contexts, seed)
    grpo_log.write(work / "grpo_log.jsonl")
    save_checkpoint(work / "grpo.npz", policy, cfg.config_hash())
    final = evaluate_policy(rt, policy, bench, work / "bench")
    return PipelineResult(untrained, after_sft, final, sft_log, grpo_log, work)


def load_policy(rt: Runtime, path: str | Path) -> TinyLMPolicy:
    policy = new_policy(rt)
    load_checkpoint(path, policy)
    return policy


def ablation_variant(
    cfg: RunConfig, variant, seed: int, workdir: str | Path
) -> MetricsReport:
    """Train one ablation variant from scratch at desk scale and evaluate it."""
    rt = Runtime.from_config(cfg)
    work = Path(workdir)
    data = work / "data"
    if not (data / "dataset.jsonl").exists():
        gen_data(rt, data, seed)
        annotate(rt, data, work / "annotations.jsonl", seed)
        filter_annotations(rt, data, work / "annotations.jsonl", work / "filtered.jsonl")
    train = training_samples(load_dataset(data / "dataset.jsonl"))
    bench_dir = work / "bench"
    bench = (
        load_dataset(bench_dir / "dataset.jsonl")
        if (bench_dir / "dataset.jsonl").exists()
        else benchmark(rt, bench_dir, train, seed)
    )
    policy = new_policy(rt)
    if variant.sft:
        run_sft(rt, policy, sft_dataset(rt, policy, data, work / "filtered.jsonl"), seed)
    if variant.rl:
        reward_cfg = cfg.reward if variant.prediction_reward else replace(cfg.reward, w_p=0.0)
        contexts = [SampleView.from_sample(s, data) for s in train]
        run_grpo(rt, policy, contexts, seed, reward_cfg)
    return evaluate_policy(rt, policy, bench, bench_dir)
