"""Command-line entry point: ``spatialvl <command> [flags]``.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure, 3 I/O error.
Log verbosity comes from ``SPATIALVL_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from spatialvl import __version__
from spatialvl.analysis import attention_report, correlation_report, emit_reports, sample_examples
from spatialvl.config import RunConfig, load_config, model_config
from spatialvl.dataset import build_vocabulary, generate_dataset, read_dataset, write_dataset
from spatialvl.errors import NumericError, ValidationError
from spatialvl.gradcheck import run_all
from spatialvl.model.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from spatialvl.model.config import ModelConfig
from spatialvl.training import ARMS, TaskSchedule, arm_ratios, evaluate, finetune, pretrain
from spatialvl.training.loop import write_loss_csv

log = logging.getLogger("spatialvl")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MANIFEST_NAME = "manifest.json"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    seeds: dict
    inputs: dict
    outputs: dict
    started: str
    finished: str = ""
    version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(args, run: RunConfig, inputs: dict) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_path=args.config,
        config_hash=run.content_hash(),
        seeds=dataclasses.asdict(run.seeds),
        inputs={k: str(v) for k, v in inputs.items() if v is not None},
        outputs={},
        started=_now(),
    )


def _finish(manifest: RunManifest, path, outputs: dict) -> None:
    manifest.outputs = {k: str(v) for k, v in outputs.items()}
    manifest.finished = _now()
    manifest.write(path)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run = run.with_seed(args.seed)
    return run


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    if not args.data:
        raise UsageError(f"{args.command}: --data is required")
    return read_dataset(args.data)


def _load_model(path, data):
    """Checkpoint checked against the dataset's vocabulary, category and feature sizes."""
    fields, _ = read_manifest(path)
    expect = dataclasses.replace(
        ModelConfig.from_dict(json.loads(fields["config"])),
        vocab_size=len(build_vocabulary(data.spec)),
        num_categories=data.spec.num_categories,
        feature_dim=data.spec.feature_dim,
    )
    return load_checkpoint(path, expect=expect)


def _splits(data):
    train, val = data.split("train"), data.split("val")
    return train or data.examples, val or data.examples


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    spec = run.data
    if args.num_examples is not None:
        spec = dataclasses.replace(spec, num_examples=args.num_examples)
    if not args.out:
        raise UsageError("gen-data: --out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args, run, {})
    examples = generate_dataset(spec)
    write_dataset(out, examples, spec)
    n_obj = [len(e.scene.objects) for e in examples]
    kinds = Counter(e.kind for e in examples)
    splits = Counter(e.split for e in examples)
    print(f"examples: {len(examples)} (train {splits['train']}, val {splits['val']})")
    print(f"objects per scene: mean {np.mean(n_obj):.2f}, min {min(n_obj)}, max {max(n_obj)}")
    print("questions: " + ", ".join(f"{k} {kinds[k]}" for k in sorted(kinds)))
    _finish(manifest, out.with_name(out.name + ".manifest.json"), {"dataset": out})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    arm = args.tasks or run.train.tasks
    if arm not in ARMS:
        raise UsageError(f"pretrain: unknown task set {arm!r}; valid arms: {', '.join(ARMS)}")
    data = _load_data(args)
    out = _out_dir(args)
    manifest = _manifest(args, run, {"data": args.data})
    t = run.train
    steps = args.steps if args.steps is not None else t.steps
    cfg = model_config(run.model, data.spec)
    vocab = build_vocabulary(data.spec)
    schedule = TaskSchedule(arm_ratios(arm), steps, run.seeds.train)
    res = pretrain(cfg, data.examples, schedule, vocab, seed=run.seeds.train, lr=t.lr, batch_size=t.batch_size,
                   weight_decay=t.weight_decay, warmup_fraction=t.warmup_fraction, literal_kl=t.literal_kl,
                   src_pairs=t.src_pairs or None)
    ckpt = save_checkpoint(out / "checkpoint", cfg, res.params, {"task_set": arm, "steps": steps})
    write_loss_csv(out / "loss.csv", res.log)
    counts = Counter(r.task for r in res.log)
    print(f"pre-trained {arm} for {steps} steps: " + ", ".join(f"{k} {counts[k]}" for k in sorted(counts)))
    if res.skipped:
        print(f"skipped steps: {len(res.skipped)}")
    _finish(manifest, out / MANIFEST_NAME, {"checkpoint": ckpt, "loss_csv": out / "loss.csv"})
    return EXIT_OK


def cmd_finetune(args) -> int:
    run = _run_config(args)
    if not args.checkpoint:
        raise UsageError("finetune: --checkpoint is required")
    data = _load_data(args)
    out = _out_dir(args)
    manifest = _manifest(args, run, {"data": args.data, "checkpoint": args.checkpoint})
    cfg, params, meta = _load_model(args.checkpoint, data)
    f = run.finetune
    steps = args.steps if args.steps is not None else f.steps
    train, val = _splits(data)
    vocab = build_vocabulary(data.spec)
    res = finetune(params, cfg, vocab, train, [], steps, seed=run.seeds.finetune, lr=f.lr,
                   batch_size=f.batch_size, weight_decay=f.weight_decay, warmup_fraction=f.warmup_fraction,
                   train_encoder=f.train_encoder)
    acc, correct, total = evaluate(res.params, cfg, vocab, val)
    meta = dict(meta, finetuned_steps=steps)
    ckpt = save_checkpoint(out / "checkpoint", cfg, res.params, meta)
    write_loss_csv(out / "loss.csv", res.log)
    report = {"accuracy": acc, "correct": correct, "total": total}
    (out / "eval.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    print(f"accuracy: {acc:.4f} ({correct}/{total})")
    _finish(manifest, out / MANIFEST_NAME, {"checkpoint": ckpt, "loss_csv": out / "loss.csv",
                                            "eval": out / "eval.json"})
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _run_config(args)
    if not args.checkpoint:
        raise UsageError("eval: --checkpoint is required")
    data = _load_data(args)
    manifest = _manifest(args, run, {"data": args.data, "checkpoint": args.checkpoint})
    cfg, params, _ = _load_model(args.checkpoint, data)
    _, val = _splits(data)
    acc, correct, total = evaluate(params, cfg, build_vocabulary(data.spec), val)
    print(f"accuracy: {acc:.4f} ({correct}/{total})")
    if args.out:
        out = _out_dir(args)
        report = {"accuracy": acc, "correct": correct, "total": total}
        (out / "eval.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
        _finish(manifest, out / MANIFEST_NAME, {"eval": out / "eval.json"})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    run = _run_config(args)
    manifest = _manifest(args, run, {})
    corrupt = (args.corrupt, 1e-3) if args.corrupt else None
    results = run_all(seed=run.seeds.train, corrupt=corrupt)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:<24} max rel err {r.max_rel_error:.3e} at {r.worst} ({r.coords} coords)")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if args.out:
        out = _out_dir(args)
        rows = [dict(dataclasses.asdict(r), passed=r.passed) for r in results]
        (out / "gradcheck.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
        _finish(manifest, out / MANIFEST_NAME, {"report": out / "gradcheck.json"})
    return EXIT_NUMERIC if failed else EXIT_OK


def _parse_layers(text: str | None):
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--layers expects comma-separated integers, got {text!r}") from None


def cmd_analyze(args) -> int:
    run = _run_config(args)
    if not args.checkpoint:
        raise UsageError("analyze: --checkpoint is required")
    data = _load_data(args)
    out = _out_dir(args)
    layers = _parse_layers(args.layers)
    manifest = _manifest(args, run, {"data": args.data, "checkpoint": args.checkpoint,
                                     "compare_checkpoint": args.compare_checkpoint})
    vocab = build_vocabulary(data.spec)
    sample = sample_examples(data.examples, seed=run.seeds.analysis)
    paths = [args.checkpoint] + ([args.compare_checkpoint] if args.compare_checkpoint else [])
    correlations, attentions = [], []
    for i, path in enumerate(paths):
        cfg, params, meta = _load_model(path, data)
        rep = correlation_report(params, cfg, vocab, sample)
        correlations.append((f"run{i}", str(meta.get("task_set", "")), rep))
        print(f"{path}: input_corr {rep.input_corr:+.4f}, output_corr {rep.output_corr:+.4f} "
              f"over {rep.n_objects} objects in {rep.n_samples} examples")
        if i == 0:
            attentions = attention_report(params, cfg, vocab, sample[0], layers=layers)
    csv_path, json_path = emit_reports(out, correlations, attentions)
    if len(correlations) == 2:
        a, b = correlations[0][2], correlations[1][2]
        print(f"delta input_corr {b.input_corr - a.input_corr:+.4f}")
    _finish(manifest, out / MANIFEST_NAME, {"correlation_csv": csv_path, "attention_json": json_path})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--out", help="output file (gen-data) or directory")

    p = _Parser(prog="spatialvl", description="Spatial-relation pre-training toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--num-examples", type=int, help="override [data] num_examples")

    arms = ", ".join(ARMS)
    t = sub.add_parser(
        "pretrain", parents=[common], help="pre-train one task arm",
        description=f"Valid --tasks arms: {arms}. Dropping a task removes its slots from each "
                    "13-step cycle; the remaining tasks keep their per-cycle counts, so the cycle shortens.",
    )
    t.add_argument("--data", help="dataset file")
    t.add_argument("--tasks", help=f"task arm ({arms})")
    t.add_argument("--steps", type=int, help="override [train] steps")

    f = sub.add_parser("finetune", parents=[common], help="fine-tune the matching head")
    f.add_argument("--data")
    f.add_argument("--checkpoint")
    f.add_argument("--steps", type=int, help="override [finetune] steps")

    e = sub.add_parser("eval", parents=[common], help="multiple-choice accuracy on the validation split")
    e.add_argument("--data")
    e.add_argument("--checkpoint")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)

    a = sub.add_parser("analyze", parents=[common], help="position-correlation and attention reports")
    a.add_argument("--data")
    a.add_argument("--checkpoint")
    a.add_argument("--compare-checkpoint", help="second checkpoint for a paired comparison row")
    a.add_argument("--layers", help="comma-separated attention layers (default: final layer)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("SPATIALVL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_VALIDATION
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
