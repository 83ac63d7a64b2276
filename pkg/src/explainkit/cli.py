"""Command-line entry points: prepare, train, generate, eval.

Every command resolves its configuration, writes a run manifest into the
output directory before doing any work, then delegates to the library
modules. Relative data paths are resolved against $EXPLAINKIT_DATA_DIR
when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from . import corpus as corpus_mod
from .corpus import (
    McqaSample,
    NliSample,
    build_classifier_inputs,
    build_generator_instance,
    load_samples_jsonl,
    normalize_ws,
    strip_explanation_prefix,
    write_mcqa_jsonl,
    write_nli_jsonl,
)
from .decoding import DecodeConfig, beam_search
from .errors import DecodeError, EvalError, ExplainkitError
from .evalsuite import EvalReport, accuracy, corpus_bleu, simulatability
from .netcore import ModelBundle, ModelConfig, option_distribution
from .objective import LossWeights
from .synthetic import SyntheticConfig, generate_copy_key
from .tokenizer import PAD_ID, build_vocab, decode, encode
from .trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "EXPLAINKIT_DATA_DIR"

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Reproducibility record written into the output directory."""

    command: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: Optional[int]
    version: str = __version__
    started_at: str = ""
    finished_at: Optional[str] = None

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def resolve_data_path(path: str) -> Path:
    """Resolve a path, using $EXPLAINKIT_DATA_DIR for relative inputs."""
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    return p


def _start_manifest(
    command: str, config: dict, inputs: list[str], outputs: list[str],
    seed: Optional[int], out_dir: Path,
) -> RunManifest:
    manifest = RunManifest(
        command=command, config=config, inputs=inputs, outputs=outputs,
        seed=seed, started_at=_now(),
    )
    manifest.write(out_dir)
    return manifest


def _finish_manifest(manifest: RunManifest, out_dir: Path) -> None:
    manifest.finished_at = _now()
    manifest.write(out_dir)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def _token_count(text: Optional[str]) -> int:
    return len(normalize_ws(text).split()) if text else 0


def _mcqa_stats(samples: list[McqaSample]) -> dict:
    n = len(samples)
    explained = [s for s in samples if s.explanation]
    return {
        "count": n,
        "num_options": samples[0].num_options if samples else 0,
        "explained_count": len(explained),
        "avg_question_tokens": (
            sum(_token_count(s.question) for s in samples) / n if n else 0.0
        ),
        "avg_explanation_tokens": (
            sum(_token_count(s.explanation) for s in explained) / len(explained)
            if explained
            else 0.0
        ),
    }


def _nli_stats(samples: list[NliSample], raw_count: Optional[int] = None) -> dict:
    n = len(samples)
    stats = {
        "count": n,
        "avg_premise_tokens": (
            sum(_token_count(s.premise) for s in samples) / n if n else 0.0
        ),
        "avg_hypothesis_tokens": (
            sum(_token_count(s.hypothesis) for s in samples) / n if n else 0.0
        ),
        "avg_explanation_tokens": (
            sum(
                _token_count(s.explanations[0]) for s in samples if s.explanations
            )
            / max(1, sum(1 for s in samples if s.explanations))
            if n
            else 0.0
        ),
    }
    if raw_count is not None:
        stats["raw_count"] = raw_count
        stats["filtered_out"] = raw_count - n
    return stats


def cmd_prepare(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    config = {
        "dataset": args.dataset,
        "inputs": list(args.inputs),
        "synthetic": {
            "n_train": args.n_train, "n_dev": args.n_dev,
            "num_options": args.num_options, "vocab": args.vocab,
            "decisive_prob": args.decisive_prob,
        } if args.dataset == "synthetic" else None,
    }
    inputs = [str(resolve_data_path(p)) for p in args.inputs]
    manifest = _start_manifest(
        "prepare", config, inputs, [str(out_dir)], args.seed, out_dir
    )

    stats: dict = {"dataset": args.dataset}
    if args.dataset == "synthetic":
        seed = args.seed if args.seed is not None else 7
        syn = SyntheticConfig(
            n_train=args.n_train, n_dev=args.n_dev,
            num_options=args.num_options, vocab=args.vocab, seed=seed,
            decisive_prob=args.decisive_prob,
        )
        train, dev = generate_copy_key(syn)
        write_mcqa_jsonl(train, out_dir / "train.jsonl")
        write_mcqa_jsonl(dev, out_dir / "dev.jsonl")
        stats["train"] = _mcqa_stats(train)
        stats["dev"] = _mcqa_stats(dev)
    elif args.dataset == "cme":
        names = ("train", "dev", "test")[: len(inputs)]
        if not inputs:
            raise ExplainkitError("cme prepare needs at least one input file")
        for name, path in zip(names, inputs):
            samples = corpus_mod.load_cme_jsonl(path)
            write_mcqa_jsonl(samples, out_dir / f"{name}.jsonl")
            stats[name] = _mcqa_stats(samples)
    elif args.dataset == "esnli":
        if len(inputs) != 3:
            raise ExplainkitError("esnli prepare needs train, dev, test files")
        raw_train = corpus_mod._load_esnli_split(inputs[0])
        train, dev, test = corpus_mod.load_esnli(*inputs)
        for name, split in (("train", train), ("dev", dev), ("test", test)):
            write_nli_jsonl(split, out_dir / f"{name}.jsonl")
        stats["train"] = _nli_stats(train, raw_count=len(raw_train))
        stats["dev"] = _nli_stats(dev)
        stats["test"] = _nli_stats(test)
    elif args.dataset in ("cose-v1.0", "cose-v1.11"):
        version = args.dataset.split("-", 1)[1]
        names = ("train", "dev", "test")[: len(inputs)]
        if not inputs:
            raise ExplainkitError("cose prepare needs at least one input file")
        for name, path in zip(names, inputs):
            samples = corpus_mod.load_cose(path, version)
            write_mcqa_jsonl(samples, out_dir / f"{name}.jsonl")
            stats[name] = _mcqa_stats(samples)
    else:
        raise ExplainkitError(f"unknown dataset {args.dataset!r}")

    (out_dir / "stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _finish_manifest(manifest, out_dir)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_CONFIG_SECTIONS = ("data", "model", "train")


def validate_train_config(config: dict) -> list[str]:
    """Return every validation problem found (empty list means valid)."""
    errors: list[str] = []
    if not isinstance(config, dict):
        return ["config root must be a JSON object"]
    unknown = set(config) - set(_TRAIN_CONFIG_SECTIONS)
    if unknown:
        errors.append(f"unknown config sections: {sorted(unknown)}")
    usable = True
    for section in _TRAIN_CONFIG_SECTIONS:
        if section not in config:
            errors.append(f"missing config section: {section}")
            usable = False
        elif not isinstance(config[section], dict):
            errors.append(f"config section {section} must be an object")
            usable = False
    if not usable:
        return errors

    data = config["data"]
    for key in ("train_path", "dev_path"):
        if key not in data:
            errors.append(f"data.{key} is required")
        elif not resolve_data_path(data[key]).exists():
            errors.append(f"data.{key}: file not found: {data[key]}")
    task = data.get("task", "mcqa")
    if task not in ("mcqa", "nli"):
        errors.append(f"data.task must be mcqa or nli, got {task!r}")
    unknown = set(data) - {"train_path", "dev_path", "task"}
    if unknown:
        errors.append(f"unknown data fields: {sorted(unknown)}")

    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(config["model"]) - model_fields
    if unknown:
        errors.append(f"unknown model fields: {sorted(unknown)}")
    else:
        model_kwargs = dict(config["model"])
        model_kwargs.setdefault("task", task)
        try:
            ModelConfig(**model_kwargs)
        except (ValueError, TypeError) as exc:
            errors.append(f"model config invalid: {exc}")

    try:
        TrainConfig.from_dict({**config["train"], "task": task})
    except (ValueError, TypeError, ExplainkitError) as exc:
        errors.append(f"train config invalid: {exc}")
    return errors


def _build_vocabs(samples, train_config: TrainConfig):
    classifier_texts = []
    generator_texts = []
    for sample in samples:
        for inst in build_classifier_inputs(sample, mode=train_config.classifier_mode):
            classifier_texts.append(inst.input_text)
        if isinstance(sample, NliSample):
            explained = bool(sample.explanations)
        else:
            explained = sample.explanation is not None
        gen = build_generator_instance(
            sample,
            supervision="explained" if explained else "unexplained",
            task=train_config.task,
            mixed=train_config.mixed_supervision,
        )
        generator_texts.append(gen.source_text)
        generator_texts.append(gen.target_text)
    return build_vocab(classifier_texts), build_vocab(generator_texts)


def cmd_train(args: argparse.Namespace) -> int:
    if not args.config:
        print("train requires --config", file=sys.stderr)
        return 2
    config_path = Path(args.config)
    if not config_path.exists():
        print(f"config file not found: {config_path}", file=sys.stderr)
        return 2
    config = json.loads(config_path.read_text(encoding="utf-8"))
    problems = validate_train_config(config)
    if problems:
        for problem in problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2

    task = config["data"].get("task", "mcqa")
    train_config = TrainConfig.from_dict({**config["train"], "task": task})
    if args.seed is not None:
        train_config.seed = args.seed
    out_dir = Path(args.out_dir)

    manifest = _start_manifest(
        "train",
        {**config, "train": train_config.to_dict()},
        [str(resolve_data_path(config["data"][k])) for k in ("train_path", "dev_path")],
        [str(out_dir / "best"), str(out_dir / "metrics.jsonl")],
        train_config.seed,
        out_dir,
    )

    train_samples = load_samples_jsonl(
        resolve_data_path(config["data"]["train_path"]), task
    )
    dev_samples = load_samples_jsonl(
        resolve_data_path(config["data"]["dev_path"]), task
    )

    torch.manual_seed(train_config.seed)
    classifier_vocab, generator_vocab = _build_vocabs(train_samples, train_config)
    model_kwargs = dict(config["model"])
    model_kwargs.setdefault("task", task)
    model_kwargs.setdefault("dropout", train_config.dropout)
    if task == "mcqa":
        model_kwargs.setdefault("K", train_samples[0].num_options)
    else:
        model_kwargs.setdefault("K", len(corpus_mod.NLI_LABELS))
    model_config = ModelConfig(**model_kwargs)
    bundle = ModelBundle.create(model_config, classifier_vocab, generator_vocab)

    state, checkpoint = fit(
        train_samples, dev_samples, train_config, bundle, out_dir,
        metrics_path=out_dir / "metrics.jsonl",
    )
    _finish_manifest(manifest, out_dir)
    print(
        json.dumps(
            {
                "best_dev_accuracy": state.best_dev_accuracy,
                "checkpoint": str(checkpoint),
                "steps": state.step,
            }
        )
    )
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def predict_label(bundle: ModelBundle, sample, classifier_mode: str, max_seq_len: int) -> int:
    """Predicted label through the classifier path only."""
    instances = build_classifier_inputs(sample, mode=classifier_mode)
    rows = [
        encode(inst.input_text, bundle.classifier_vocab, max_seq_len)
        for inst in instances
    ]
    length = max(len(r) for r in rows)
    ids = torch.full((1, len(rows), length), PAD_ID, dtype=torch.long)
    for j, row in enumerate(rows):
        ids[0, j, : len(row)] = torch.tensor(row, dtype=torch.long)
    with torch.no_grad():
        if bundle.config.task == "nli":
            scores = bundle.classifier(ids[:, 0], ids[:, 0] == PAD_ID)
        else:
            scores = bundle.classifier.option_scores(ids, ids == PAD_ID)
    return int(option_distribution(scores).argmax(dim=-1))


def generate_for_sample(
    bundle: ModelBundle, sample, decode_config: DecodeConfig,
    task: str, classifier_mode: str, max_seq_len: int, mixed: bool = False,
) -> dict:
    gen = build_generator_instance(
        sample, supervision="unexplained", task=task
    )
    source_text = gen.source_text
    if mixed:
        # mixed-supervision models emit explanations only for prefixed sources
        source_text = corpus_mod.MIXED_SOURCE_PREFIX + source_text
    src = torch.tensor(
        encode(source_text, bundle.generator_vocab, max_seq_len),
        dtype=torch.long,
    )
    hypotheses = beam_search(bundle.generator, src, decode_config)
    candidates = [
        decode(h.ids, bundle.generator_vocab) for h in hypotheses
    ]
    record = {
        "id": sample.id,
        "predicted_label": predict_label(bundle, sample, classifier_mode, max_seq_len),
        "explanation": strip_explanation_prefix(candidates[0]),
    }
    if decode_config.num_return > 1:
        record["candidates"] = candidates
    return record


def cmd_generate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_path = Path(args.out) if args.out else out_dir / "explanations.jsonl"
    decode_config = DecodeConfig(
        beams=args.beams, max_len=args.max_len,
        repetition_penalty=args.rep_penalty, num_return=args.num_return,
    )
    manifest = _start_manifest(
        "generate",
        {
            "checkpoint": args.checkpoint, "data": args.data,
            "task": args.task, "classifier_mode": args.classifier_mode,
            "decode": dataclasses.asdict(decode_config),
        },
        [args.checkpoint, str(resolve_data_path(args.data))],
        [str(out_path)], args.seed, out_dir,
    )

    bundle = ModelBundle.load(args.checkpoint)
    samples = load_samples_jsonl(resolve_data_path(args.data), args.task)
    failures = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample in samples:
            try:
                record = generate_for_sample(
                    bundle, sample, decode_config, args.task,
                    args.classifier_mode, args.max_seq_len, mixed=args.mixed,
                )
            except (DecodeError, ValueError) as exc:
                logger.error("decode failed for sample %s: %s", sample.id, exc)
                record = {"id": sample.id, "error": str(exc)}
                failures += 1
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    _finish_manifest(manifest, out_dir)
    print(json.dumps({"written": len(samples), "failures": failures, "path": str(out_path)}))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_explanations(path: str | Path) -> dict[str, dict]:
    records = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                records[str(record["id"])] = record
    return records


def _gold_label(sample) -> int:
    return sample.label_index if isinstance(sample, NliSample) else sample.answer_index


def _gold_references(sample) -> list[str]:
    if isinstance(sample, NliSample):
        return sample.bleu_references
    return [sample.explanation] if sample.explanation else []


def cmd_eval(args: argparse.Namespace) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"accuracy", "bleu", "accuracy_ye"}
    unknown = set(metrics) - known
    if unknown:
        print(f"unknown metrics: {sorted(unknown)}", file=sys.stderr)
        return 2

    out_dir = Path(args.out_dir)
    manifest = _start_manifest(
        "eval",
        {
            "metrics": metrics, "data": args.data, "task": args.task,
            "checkpoint": args.checkpoint, "explanations": args.explanations,
            "probe_train": args.probe_train, "num_probes": args.num_probes,
        },
        [str(resolve_data_path(args.data))],
        [str(out_dir / "report.json")], args.seed, out_dir,
    )

    samples = load_samples_jsonl(resolve_data_path(args.data), args.task)
    explanations = _load_explanations(args.explanations) if args.explanations else None
    report = EvalReport(counts={"samples": len(samples)})

    if "accuracy" in metrics:
        golds = [_gold_label(s) for s in samples]
        if explanations is not None:
            missing = [s.id for s in samples if s.id not in explanations]
            if missing:
                raise EvalError(f"accuracy: explanations missing ids {missing[:5]}")
            predictions = [explanations[s.id]["predicted_label"] for s in samples]
        elif args.checkpoint:
            bundle = ModelBundle.load(args.checkpoint)
            predictions = [
                predict_label(bundle, s, args.classifier_mode, args.max_seq_len)
                for s in samples
            ]
        else:
            raise EvalError("accuracy needs --explanations or --checkpoint")
        report.accuracy = accuracy(predictions, golds)

    if "bleu" in metrics:
        if explanations is None:
            raise EvalError("bleu needs --explanations")
        pairs = [
            (explanations[s.id]["explanation"], _gold_references(s))
            for s in samples
            if s.id in explanations and _gold_references(s)
        ]
        if not pairs:
            raise EvalError("bleu: no samples with both a candidate and references")
        report.bleu = corpus_bleu([p[0] for p in pairs], [p[1] for p in pairs])
        report.counts["bleu_pairs"] = len(pairs)

    if "accuracy_ye" in metrics:
        if args.task != "mcqa":
            raise EvalError("accuracy_ye is defined for the mcqa task")
        if not args.probe_train:
            raise EvalError("accuracy_ye needs --probe-train")
        if not args.config:
            raise EvalError("accuracy_ye needs --config with model/train sections")
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        train_config = TrainConfig.from_dict(config.get("train", {}))
        if args.seed is not None:
            train_config.seed = args.seed
        model_config = ModelConfig(**config.get("model", {}))
        probe_train = load_samples_jsonl(resolve_data_path(args.probe_train), "mcqa")
        eval_pairs = []
        for s in samples:
            text = (
                explanations[s.id]["explanation"]
                if explanations is not None and s.id in explanations
                else s.explanation
            )
            if text:
                eval_pairs.append((s, text))
        if not eval_pairs:
            raise EvalError("accuracy_ye: no explanations available to evaluate")
        mean, per_probe = simulatability(
            probe_train, eval_pairs, model_config, train_config,
            num_probes=args.num_probes,
        )
        report.accuracy_ye = mean
        report.per_probe_accuracy = per_probe
        report.counts["probe_eval_samples"] = len(eval_pairs)

    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    (out_dir / "report.json").write_text(rendered + "\n", encoding="utf-8")
    _finish_manifest(manifest, out_dir)
    print(rendered)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="explainkit",
        description="Joint answer prediction and explanation generation toolkit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out-dir", default="runs/latest", help="output directory")

    p = sub.add_parser("prepare", help="normalize a dataset into JSONL splits")
    common(p)
    p.add_argument(
        "--dataset", required=True,
        choices=["cme", "esnli", "cose-v1.0", "cose-v1.11", "synthetic"],
    )
    p.add_argument("inputs", nargs="*", help="input files (train [dev [test]])")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--num-options", type=int, default=4)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--decisive-prob", type=float, default=1.0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the joint model from a config file")
    common(p)
    p.set_defaults(func=cmd_train)

    def decode_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--beams", type=int, default=20)
        p.add_argument("--max-len", type=int, default=200)
        p.add_argument("--rep-penalty", type=float, default=1.5)
        p.add_argument("--num-return", type=int, default=1)

    p = sub.add_parser("generate", help="predict labels and generate explanations")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output JSONL path (default <out-dir>/explanations.jsonl)")
    p.add_argument("--task", choices=["mcqa", "nli"], default="mcqa")
    p.add_argument("--classifier-mode", default="qa_only")
    p.add_argument("--max-seq-len", type=int, default=256)
    p.add_argument("--mixed", action="store_true",
                   help="prefix sources for mixed-supervision checkpoints")
    decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions and explanations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["mcqa", "nli"], default="mcqa")
    p.add_argument("--metrics", default="accuracy", help="comma list: accuracy,bleu,accuracy_ye")
    p.add_argument("--checkpoint")
    p.add_argument("--explanations", help="JSONL from the generate command")
    p.add_argument("--probe-train", help="probe training data for accuracy_ye")
    p.add_argument("--num-probes", type=int, default=3)
    p.add_argument("--classifier-mode", default="qa_only")
    p.add_argument("--max-seq-len", type=int, default=256)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExplainkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
