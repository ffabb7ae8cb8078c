"""Command-line pipeline: gen-task, train-lm, gen-noise, train-ebm, decode, eval, dump-tree.

Every command reads one flat TOML config (--config), is idempotent for a
fixed (config, seed), and writes artifacts under the configured output
directory together with a ``<name>.meta.json`` sidecar embedding the seed,
config hash, and tool version.

Exit codes: 0 success, 1 validation error, 2 missing upstream artifact,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .energy import FeatureMap, FeedForwardEnergy, load_energy, save_energy
from .errors import ConfigError, DependencyError, EbmctsError
from .harness import (
    EvalReport,
    NoisyExpertModel,
    Transcript,
    check_answer,
    decode_greedy,
    evaluate,
    gen_task,
    instruction_span,
    load_dataset,
    sample_then_rank,
    save_dataset,
    self_consistency,
    task_vocabulary,
)
from .mcts import mcts_decode
from .nce import save_trace, train_energy
from .noise import (
    build_training_set,
    load_pool,
    rejection_sample,
    save_pool,
    suboutput_sample,
    unfiltered_sample,
)
from .remote import RemoteModel
from .textmodel import (
    GeneratorModel,
    NgramModel,
    ResponseSample,
    Vocabulary,
    train_ngram,
    vocab_from_json,
    vocab_to_json,
)

METHODS = ("greedy", "self-consistency", "rank-reject", "rank-both", "mcts-reject", "mcts-both")
EBM_VARIANTS = ("reject", "both")

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
GENERATOR_FILE = "generator.json"
POOL_FILES = {
    "rejection": "pool_rejection.jsonl",
    "suboutput": "pool_suboutput.jsonl",
    "unfiltered": "pool_unfiltered.jsonl",
}
ENERGY_FILES = {"reject": "energy_reject.txt", "both": "energy_both.txt"}
TRACE_FILES = {"reject": "trace_reject.csv", "both": "trace_both.csv"}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise ConfigError(message)


def _write_meta(path: Path, config: RunConfig) -> None:
    meta = {"seed": config.seed, "config_hash": config.config_hash(), "tool_version": __version__}
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, sort_keys=True) + "\n")


def _require(config: RunConfig, filename: str, producer: str) -> Path:
    path = config.out_dir / filename
    if not path.exists():
        raise DependencyError(f"missing {path}; run `ebmcts {producer}` first")
    return path


def _load_vocab_and_generator(config: RunConfig) -> tuple[Vocabulary, GeneratorModel]:
    path = _require(config, GENERATOR_FILE, "train-lm")
    payload = json.loads(path.read_text())
    vocab = vocab_from_json(payload["vocab"])
    kind = payload["kind"]
    if kind == "ngram":
        return vocab, NgramModel.from_json(payload)
    if kind == "expert":
        params = config.expert_params()
        model = NoisyExpertModel(vocab, params)
        return vocab, model
    if kind == "remote":
        return vocab, RemoteModel(
            vocab,
            payload["endpoint"],
            split_prefix=lambda ids: instruction_span(vocab, ids),
        )
    raise ConfigError(f"generator file has unknown kind {kind!r}")


def _load_energy_variant(config: RunConfig, variant: str, vocab: Vocabulary) -> FeedForwardEnergy:
    path = _require(config, ENERGY_FILES[variant], "train-ebm")
    return load_energy(path, vocab)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_task(config: RunConfig) -> None:
    spec = config.task_spec()
    vocab = task_vocabulary(spec)
    train, test = gen_task(spec, np.random.default_rng(spec.seed))
    config.out_dir.mkdir(parents=True, exist_ok=True)
    for name, split in ((TRAIN_FILE, train), (TEST_FILE, test)):
        path = config.out_dir / name
        save_dataset(path, vocab, split)
        _write_meta(path, config)
    print(f"gen-task: {len(train)} train / {len(test)} test problems -> {config.out_dir}")


def cmd_train_lm(config: RunConfig) -> None:
    spec = config.task_spec()
    vocab = task_vocabulary(spec)
    train_path = _require(config, TRAIN_FILE, "gen-task")
    kind = config["generator_kind"]
    if kind == "ngram":
        corpus = load_dataset(train_path, vocab)
        model = train_ngram(vocab, corpus, int(config["ngram_order"]), float(config["ngram_alpha"]))
        payload = {"kind": "ngram", **model.to_json()}
    elif kind == "expert":
        p = config.expert_params()
        payload = {
            "kind": "expert",
            "vocab": vocab_to_json(vocab),
            "flip_rate": p.flip_rate,
            "correct_mass": p.correct_mass,
            "stop_mass": p.stop_mass,
            "flipped_stop_mass": p.flipped_stop_mass,
            "seed": p.seed,
        }
    else:  # remote
        payload = {
            "kind": "remote",
            "vocab": vocab_to_json(vocab),
            "endpoint": config["remote_endpoint"],
        }
    path = config.out_dir / GENERATOR_FILE
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")
    _write_meta(path, config)
    print(f"train-lm: wrote {kind} generator -> {path}")


def cmd_gen_noise(config: RunConfig) -> None:
    vocab, lm = _load_vocab_and_generator(config)
    train = load_dataset(_require(config, TRAIN_FILE, "gen-task"), vocab)
    pools = [
        ("rejection", rejection_sample(
            lm, train, config.noise_config("rejection"), check_answer, config.seed)),
        ("suboutput", suboutput_sample(
            lm, train, config.noise_config("suboutput"), config.seed + 1)),
    ]
    if config["noise_include_unfiltered"]:
        pools.append(("unfiltered", unfiltered_sample(
            lm, train, config.noise_config("suboutput"), config.seed + 2)))
    for source, pool in pools:
        path = config.out_dir / POOL_FILES[source]
        save_pool(pool, path, vocab)
        _write_meta(path, config)
        print(
            f"gen-noise[{source}]: {len(pool.samples)} samples, "
            f"{len(pool.errors)} errors, {pool.skipped_instructions} skipped -> {path}"
        )


def cmd_train_ebm(config: RunConfig) -> None:
    vocab, _ = _load_vocab_and_generator(config)
    train = load_dataset(_require(config, TRAIN_FILE, "gen-task"), vocab)
    pools = {
        source: load_pool(_require(config, POOL_FILES[source], "gen-noise"), vocab)
        for source in ("rejection", "suboutput")
    }
    fm = FeatureMap(
        ngram_order=int(config["energy_ngram_order"]),
        dim=int(config["energy_dim"]),
        seed=int(config["energy_hash_seed"]),
    )
    for variant in EBM_VARIANTS:
        chosen = [pools["rejection"]] if variant == "reject" else [pools["rejection"], pools["suboutput"]]
        data = build_training_set(train, chosen)
        ef0 = FeedForwardEnergy.init_random(
            vocab, fm, hidden=int(config["energy_hidden"]), seed=config.seed
        )
        ef, trace = train_energy(ef0, data, config.optimizer_config())
        energy_path = config.out_dir / ENERGY_FILES[variant]
        save_energy(ef, energy_path)
        _write_meta(energy_path, config)
        trace_path = config.out_dir / TRACE_FILES[variant]
        save_trace(trace, trace_path)
        _write_meta(trace_path, config)
        print(
            f"train-ebm[{variant}]: {len(data.positives)}+/{len(data.negatives)}- examples, "
            f"final loss {trace[-1].train_loss:.4f} -> {energy_path}"
        )


def _method_runner(config: RunConfig, method: str):
    vocab, lm = _load_vocab_and_generator(config)
    n_paths = int(config["eval_n_paths"])
    mcts_cfg = config.mcts_config()
    if method == "greedy":
        return vocab, lambda ex, rng: decode_greedy(lm, ex.instruction), 1
    if method == "self-consistency":
        return vocab, lambda ex, rng: self_consistency(lm, ex.instruction, n_paths, rng), n_paths
    if method in ("rank-reject", "rank-both"):
        ef = _load_energy_variant(config, method.split("-")[1], vocab)
        return vocab, lambda ex, rng: sample_then_rank(lm, ef, ex.instruction, n_paths, rng), n_paths
    if method in ("mcts-reject", "mcts-both"):
        ef = _load_energy_variant(config, method.split("-")[1], vocab)

        def run(ex, rng):
            result = mcts_decode(lm, ef, ex.instruction, mcts_cfg, rng)
            return ResponseSample(result.response, 0.0, forced=result.forced)

        return vocab, run, 1
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def _eval_worker(args: tuple) -> EvalReport:
    values, method, lo, hi = args
    config = RunConfig(values)
    vocab, fn, path_num = _method_runner(config, method)
    test = load_dataset(config.out_dir / TEST_FILE, vocab)
    return evaluate(
        fn, test[lo:hi], vocab, method, path_num=path_num, seed=config.seed, index_offset=lo
    )


def _run_method(config: RunConfig, method: str, jobs: int) -> EvalReport:
    _require(config, TEST_FILE, "gen-task")
    if jobs <= 1:
        vocab, fn, path_num = _method_runner(config, method)
        test = load_dataset(config.out_dir / TEST_FILE, vocab)
        return evaluate(fn, test, vocab, method, path_num=path_num, seed=config.seed)
    vocab, _, path_num = _method_runner(config, method)
    test = load_dataset(config.out_dir / TEST_FILE, vocab)
    n = len(test)
    bounds = [(i * n // jobs, (i + 1) * n // jobs) for i in range(jobs)]
    tasks = [(config.values, method, lo, hi) for lo, hi in bounds if hi > lo]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_eval_worker, tasks))
    transcripts: list[Transcript] = []
    correct = 0
    for part in parts:
        transcripts.extend(part.transcripts)
        correct += sum(t.correct for t in part.transcripts)
    transcripts.sort(key=lambda t: t.problem_index)
    return EvalReport(
        method=method,
        pass1=correct / n,
        path_num=path_num,
        n_problems=n,
        seed=config.seed,
        transcripts=tuple(transcripts),
    )


def _save_transcripts(config: RunConfig, method: str, report: EvalReport) -> Path:
    path = config.out_dir / f"transcripts_{method}.jsonl"
    with open(path, "w") as fh:
        for t in report.transcripts:
            fh.write(
                json.dumps(
                    {
                        "problem_index": t.problem_index,
                        "response": t.response_text,
                        "answer": t.answer,
                        "correct": t.correct,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _write_meta(path, config)
    return path


def cmd_decode(config: RunConfig, method: str, jobs: int) -> None:
    report = _run_method(config, method, jobs)
    path = _save_transcripts(config, method, report)
    print(f"decode[{method}]: pass@1 {report.pass1:.4f} -> {path}")


def cmd_eval(config: RunConfig, methods: list[str], jobs: int) -> None:
    rows = []
    for method in methods:
        report = _run_method(config, method, jobs)
        tpath = _save_transcripts(config, method, report)
        rpath = config.out_dir / f"report_{method}.json"
        rpath.write_text(json.dumps(report.to_json(str(tpath)), sort_keys=True) + "\n")
        _write_meta(rpath, config)
        rows.append(report.to_json(str(tpath)))
        print(f"eval[{method}]: pass@1 {report.pass1:.4f} (path-num {report.path_num})")
    summary = config.out_dir / "report_all.json"
    summary.write_text(json.dumps(rows, sort_keys=True) + "\n")
    _write_meta(summary, config)


def cmd_dump_tree(config: RunConfig, problem_id: int) -> None:
    vocab, lm = _load_vocab_and_generator(config)
    ef = _load_energy_variant(config, "both", vocab)
    test = load_dataset(_require(config, TEST_FILE, "gen-task"), vocab)
    if not 0 <= problem_id < len(test):
        raise ConfigError(f"problem id {problem_id} outside the test set (0..{len(test) - 1})")
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, problem_id)))
    result = mcts_decode(lm, ef, test[problem_id].instruction, config.mcts_config(), rng)
    path = config.out_dir / f"tree_{problem_id}.json"
    path.write_text(json.dumps(result.steps[0].tree, sort_keys=True) + "\n")
    _write_meta(path, config)
    print(f"dump-tree: problem {problem_id}, {len(result.steps)} committed sentences -> {path}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="ebmcts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-task", "train-lm", "gen-noise", "train-ebm", "decode", "eval", "dump-tree"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name in ("decode", "eval"):
            p.add_argument("--jobs", type=int, default=1)
        if name == "decode":
            p.add_argument("--method", required=True, choices=METHODS)
        if name == "eval":
            p.add_argument("--method", action="append", choices=METHODS, default=None)
        if name == "dump-tree":
            p.add_argument("--problem", type=int, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        overrides: dict = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        config = load_config(args.config, overrides=overrides)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-task":
            cmd_gen_task(config)
        elif args.command == "train-lm":
            cmd_train_lm(config)
        elif args.command == "gen-noise":
            cmd_gen_noise(config)
        elif args.command == "train-ebm":
            cmd_train_ebm(config)
        elif args.command == "decode":
            cmd_decode(config, args.method, args.jobs)
        elif args.command == "eval":
            methods = args.method or list(METHODS)
            cmd_eval(config, methods, args.jobs)
        elif args.command == "dump-tree":
            cmd_dump_tree(config, args.problem)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EbmctsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
