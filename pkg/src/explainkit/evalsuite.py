"""Evaluation metrics: accuracy, corpus BLEU, and explanation
simulatability.

Simulatability trains independently seeded probe classifiers on
question+option+evidence inputs and tests them on option+explanation
inputs with the question removed: high scores mean the explanation alone
carries enough signal to recover the answer.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field, asdict, replace
from typing import Optional, Sequence

import torch

from .corpus import McqaSample, build_classifier_inputs, normalize_ws
from .errors import EvalError, TrainingError
from .netcore import ModelBundle, ModelConfig, option_distribution
from .tokenizer import PAD_ID, build_vocab, encode
from .trainer import (
    TrainConfig,
    TrainState,
    make_batch,
    make_optimizers,
    make_schedulers,
    train_step,
)

logger = logging.getLogger(__name__)

BLEU_MAX_ORDER = 4


@dataclass
class EvalReport:
    accuracy: Optional[float] = None
    bleu: Optional[float] = None
    accuracy_ye: Optional[float] = None
    per_probe_accuracy: list[float] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(predictions: Sequence[int], golds: Sequence[int]) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(golds):
        raise EvalError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    if not golds:
        raise EvalError("empty inputs")
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Corpus-level BLEU in [0, 100].

    4-gram modified precisions with a geometric mean and brevity penalty.
    Orders (above 1-gram) with zero matches get add-one smoothing; orders
    with no candidate n-grams at all are excluded from the mean. The
    reference length is the closest reference per segment, ties to the
    shorter. Tokenization is whitespace normalization.
    """
    if len(candidates) != len(references):
        raise EvalError("candidates and references must align")
    if any(not refs for refs in references):
        raise EvalError("every reference list must be non-empty")

    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    candidate_length = 0
    reference_length = 0
    for candidate, refs in zip(candidates, references):
        cand_tokens = normalize_ws(candidate).split()
        ref_token_lists = [normalize_ws(r).split() for r in refs]
        candidate_length += len(cand_tokens)
        reference_length += min(
            (abs(len(r) - len(cand_tokens)), len(r)) for r in ref_token_lists
        )[1]
        for n in range(1, BLEU_MAX_ORDER + 1):
            cand_counts = _ngrams(cand_tokens, n)
            if not cand_counts:
                continue
            max_ref: Counter = Counter()
            for ref_tokens in ref_token_lists:
                for gram, count in _ngrams(ref_tokens, n).items():
                    max_ref[gram] = max(max_ref[gram], count)
            totals[n - 1] += sum(cand_counts.values())
            matches[n - 1] += sum(
                min(count, max_ref[gram]) for gram, count in cand_counts.items()
            )

    log_precision_sum = 0.0
    used_orders = 0
    for n in range(1, BLEU_MAX_ORDER + 1):
        total, match = totals[n - 1], matches[n - 1]
        if total == 0:
            continue
        if match == 0:
            if n == 1:
                return 0.0
            precision = 1.0 / (total + 1.0)
        else:
            precision = match / total
        log_precision_sum += math.log(precision)
        used_orders += 1

    if used_orders == 0 or candidate_length == 0:
        return 0.0
    geo_mean = math.exp(log_precision_sum / used_orders)
    brevity = (
        1.0
        if candidate_length > reference_length
        else math.exp(1.0 - reference_length / candidate_length)
    )
    return 100.0 * geo_mean * brevity


def _strip_explanations(samples: Sequence[McqaSample]) -> list[McqaSample]:
    return [replace(s, explanation=None) for s in samples]


def _train_probe(
    probe_train: Sequence[McqaSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
) -> ModelBundle:
    """Classifier-only probe trained on question+option+evidence inputs."""
    config = replace(
        train_config,
        seed=seed,
        classifier_mode="qa_evidence",
        weights=replace(train_config.weights, ce=1.0, mle=0.0, ce_g=0.0, dis=0.0),
    )
    texts = [
        inst.input_text
        for s in probe_train
        for inst in build_classifier_inputs(s, mode="qa_evidence")
    ]
    torch.manual_seed(seed)
    vocab = build_vocab(texts)
    bundle = ModelBundle.create(replace(model_config), vocab, vocab)
    rng = random.Random(seed)
    state = TrainState()
    steps_per_epoch = max(
        1, -(-len(probe_train) // (config.batch_size * config.grad_accumulation_steps))
    )
    optimizers = make_optimizers(bundle, config)
    schedulers = make_schedulers(
        optimizers, max(1, config.epochs * steps_per_epoch), config.warmup_proportion
    )
    samples = list(probe_train)
    for _ in range(config.epochs):
        rng.shuffle(samples)
        micro_size = config.batch_size
        group = micro_size * config.grad_accumulation_steps
        for start in range(0, len(samples), group):
            chunk = samples[start : start + group]
            batches = [
                make_batch(
                    chunk[i : i + micro_size],
                    "mcqa",
                    bundle.classifier_vocab,
                    bundle.generator_vocab,
                    classifier_mode="qa_evidence",
                    max_seq_len=config.max_seq_len,
                )
                for i in range(0, len(chunk), micro_size)
            ]
            bundle.classifier.train()
            train_step(
                state, batches, bundle, config.weights, optimizers, schedulers, config
            )
    bundle.eval_mode()
    return bundle


def _probe_accuracy(
    bundle: ModelBundle,
    eval_samples: Sequence[tuple[McqaSample, str]],
    max_seq_len: int,
    batch_size: int = 64,
) -> float:
    """Accuracy on option+explanation probe inputs (question removed)."""
    rows = []
    answers = []
    for sample, explanation in eval_samples:
        instances = build_classifier_inputs(
            sample, mode="probe_test", explanation=explanation
        )
        rows.append(
            [
                encode(inst.input_text, bundle.classifier_vocab, max_seq_len)
                for inst in instances
            ]
        )
        answers.append(sample.answer_index)

    correct = 0
    with torch.no_grad():
        for start in range(0, len(rows), batch_size):
            chunk = rows[start : start + batch_size]
            length = max(len(seq) for group in chunk for seq in group)
            ids = torch.full(
                (len(chunk), len(chunk[0]), length), PAD_ID, dtype=torch.long
            )
            for i, group in enumerate(chunk):
                for j, seq in enumerate(group):
                    ids[i, j, : len(seq)] = torch.tensor(seq, dtype=torch.long)
            probs = option_distribution(
                bundle.classifier.option_scores(ids, ids == PAD_ID)
            )
            predicted = probs.argmax(dim=-1).tolist()
            for offset, p in enumerate(predicted):
                correct += p == answers[start + offset]
    return correct / len(rows)


def simulatability(
    probe_train: Sequence[McqaSample],
    eval_samples: Sequence[tuple[McqaSample, str]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    num_probes: int = 3,
) -> tuple[float, list[float]]:
    """Mean probe accuracy over num_probes independently seeded probes.

    Probes never see gold explanations: they train on evidence inputs with
    the explanation field stripped. A probe whose training diverges is
    retried once with a fresh seed, then reported as failed.
    """
    if num_probes < 1:
        raise EvalError("num_probes must be >= 1")
    if any(s.evidence is None for s in probe_train):
        raise EvalError("probe training samples must all carry evidence")
    train_clean = _strip_explanations(probe_train)

    per_probe = []
    for probe_index in range(num_probes):
        seed = train_config.seed + probe_index
        for attempt, attempt_seed in enumerate((seed, seed + 1000)):
            try:
                bundle = _train_probe(
                    train_clean, model_config, train_config, attempt_seed
                )
                break
            except TrainingError as exc:
                logger.warning(
                    "probe %d attempt %d diverged: %s", probe_index, attempt, exc
                )
        else:
            raise EvalError(f"probe {probe_index} failed twice with divergence")
        per_probe.append(
            _probe_accuracy(bundle, eval_samples, train_config.max_seq_len)
        )
    return sum(per_probe) / len(per_probe), per_probe
