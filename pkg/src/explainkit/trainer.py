"""Joint training loop for the classifier and generator.

Each optimizer step consumes ``grad_accumulation_steps`` micro-batches,
computes the four loss terms (zero-weight terms are skipped entirely),
clips the gradient norm per component, and steps two independent
optimizers with linear warmup-then-decay schedules. Model selection keeps
the checkpoint with the best dev accuracy, evaluated through the
classifier path only.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import Tensor
from torch.optim.lr_scheduler import LambdaLR

from . import corpus as corpus_mod
from .corpus import McqaSample, NliSample
from .errors import SchemaError, TrainingError
from .netcore import ModelBundle, ModelConfig, option_distribution
from .objective import (
    LossReport,
    LossWeights,
    classification_loss,
    distillation_loss,
    generator_label_loss,
    mle_loss,
    total_loss,
)
from .tokenizer import CLS_ID, EOS_ID, PAD_ID, Vocab, encode

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    max_seq_len: int = 256
    warmup_proportion: float = 0.1
    grad_clip_norm: float = 1.0
    dropout: float = 0.1
    classifier_lr: float = 2e-5
    generator_lr: float = 1e-3
    batch_size: int = 16
    grad_accumulation_steps: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    classifier_mode: str = "qa_only"
    mixed_supervision: bool = False
    task: str = "mcqa"
    loss_reduction: str = "mean"
    detach_distillation_target: bool = False
    generator_optimizer: str = "adafactor"  # adafactor | adamw

    def to_dict(self) -> dict:
        data = asdict(self)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights(**data["weights"])
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    step: int = 0
    best_dev_accuracy: float = -1.0
    best_checkpoint: Optional[str] = None
    metrics: list[dict] = field(default_factory=list)


@dataclass
class Batch:
    """Encoded tensors for one micro-batch.

    Classifier instances are grouped per sample in sample-major order;
    the generator side holds one source/target pair per sample.
    """

    classifier_ids: Tensor  # (N, K, L) for MCQA, (N, 1, L) for NLI
    answers: Tensor  # (N,)
    gen_src: Tensor  # (N, Ls)
    gen_tgt_in: Tensor  # (N, Lt), begin-symbol shifted
    gen_tgt_out: Tensor  # (N, Lt)
    gen_tgt_mask: Tensor  # (N, Lt), True at real positions
    sample_count: int
    token_count: int


def _pad_stack(sequences: list[list[int]]) -> Tensor:
    length = max(len(s) for s in sequences)
    out = torch.full((len(sequences), length), PAD_ID, dtype=torch.long)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return out


def make_batch(
    samples: Sequence[McqaSample | NliSample],
    task: str,
    classifier_vocab: Vocab,
    generator_vocab: Vocab,
    classifier_mode: str = "qa_only",
    mixed_supervision: bool = False,
    max_seq_len: int = 256,
) -> Batch:
    """Render and encode one micro-batch of samples.

    The supervision branch is chosen per sample from whether it carries an
    explanation. All MCQA samples in a batch must share the same K.
    """
    if not samples:
        raise SchemaError("empty batch")
    if task == "mcqa":
        option_counts = {s.num_options for s in samples}
        if len(option_counts) > 1:
            raise SchemaError(f"mixed option counts in batch: {sorted(option_counts)}")

    classifier_rows: list[list[int]] = []
    answers: list[int] = []
    sources: list[list[int]] = []
    targets: list[list[int]] = []
    for sample in samples:
        instances = corpus_mod.build_classifier_inputs(sample, mode=classifier_mode)
        for inst in instances:
            classifier_rows.append(encode(inst.input_text, classifier_vocab, max_seq_len))
        answers.append(instances[0].label)

        if isinstance(sample, NliSample):
            explained = bool(sample.explanations)
        else:
            explained = sample.explanation is not None
        gen = corpus_mod.build_generator_instance(
            sample,
            supervision="explained" if explained else "unexplained",
            task=task,
            mixed=mixed_supervision,
        )
        sources.append(encode(gen.source_text, generator_vocab, max_seq_len))
        # leave room for the appended EOS within the length budget
        targets.append(encode(gen.target_text, generator_vocab, max_seq_len - 1))

    n = len(samples)
    k = len(classifier_rows) // n
    classifier_ids = _pad_stack(classifier_rows).reshape(n, k, -1)

    tgt_in = [[CLS_ID] + t for t in targets]
    tgt_out = [t + [EOS_ID] for t in targets]
    gen_tgt_out = _pad_stack(tgt_out)
    return Batch(
        classifier_ids=classifier_ids,
        answers=torch.tensor(answers, dtype=torch.long),
        gen_src=_pad_stack(sources),
        gen_tgt_in=_pad_stack(tgt_in),
        gen_tgt_out=gen_tgt_out,
        gen_tgt_mask=gen_tgt_out != PAD_ID,
        sample_count=n,
        token_count=int((gen_tgt_out != PAD_ID).sum()),
    )


def _classifier_scores(bundle: ModelBundle, batch: Batch) -> Tensor:
    ids = batch.classifier_ids
    pad = ids == PAD_ID
    if bundle.config.task == "nli":
        return bundle.classifier(ids[:, 0], pad[:, 0])
    return bundle.classifier.option_scores(ids, pad)


def compute_losses(
    bundle: ModelBundle,
    batch: Batch,
    weights: LossWeights,
    reduction: str = "mean",
    detach_distillation_target: bool = False,
) -> tuple[Tensor, LossReport]:
    """All four loss terms on one micro-batch; zero-weight terms are skipped.

    Distillation pairs each sample's classifier logits with its own
    generator label logits.
    """
    zero = torch.zeros((), dtype=torch.float32)
    need_classifier = weights.ce > 0 or weights.dis > 0
    need_generator = weights.mle > 0 or weights.ce_g > 0 or weights.dis > 0

    scores = _classifier_scores(bundle, batch) if need_classifier else None
    ce = (
        classification_loss(scores, batch.answers, reduction)
        if weights.ce > 0
        else zero
    )

    mle = ce_g = dis = zero
    if need_generator:
        src_pad = batch.gen_src == PAD_ID
        tgt_pad = ~batch.gen_tgt_mask
        logits, states = bundle.generator(
            batch.gen_src, batch.gen_tgt_in, src_pad, tgt_pad
        )
        if weights.mle > 0:
            mle = mle_loss(logits, batch.gen_tgt_out, batch.gen_tgt_mask, reduction)
        if weights.ce_g > 0 or weights.dis > 0:
            label_logits = bundle.generator.label_logits(states, tgt_pad)
            if weights.ce_g > 0:
                ce_g = generator_label_loss(label_logits, batch.answers, reduction)
            if weights.dis > 0:
                dis = distillation_loss(
                    scores,
                    label_logits,
                    temperature=weights.temperature,
                    detach_target=detach_distillation_target,
                    reduction=reduction,
                )

    total = total_loss(ce, mle, ce_g, dis, weights)
    report = LossReport(
        ce=float(ce.detach()),
        mle=float(mle.detach()),
        ce_g=float(ce_g.detach()),
        dis=float(dis.detach()),
        total=float(total.detach()),
        token_count=batch.token_count,
        sample_count=batch.sample_count,
    )
    return total, report


def make_optimizers(bundle: ModelBundle, config: TrainConfig):
    """One optimizer per component: AdamW for the classifier, Adafactor
    (AdamW fallback) for the generator, at their respective rates."""
    classifier_opt = torch.optim.AdamW(
        bundle.classifier.parameters(), lr=config.classifier_lr
    )
    if config.generator_optimizer == "adafactor" and hasattr(torch.optim, "Adafactor"):
        generator_opt = torch.optim.Adafactor(
            bundle.generator.parameters(), lr=config.generator_lr
        )
    else:
        generator_opt = torch.optim.AdamW(
            bundle.generator.parameters(), lr=config.generator_lr
        )
    return classifier_opt, generator_opt


def make_schedulers(optimizers, total_steps: int, warmup_proportion: float):
    warmup = max(1, int(round(total_steps * warmup_proportion)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if total_steps <= warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))

    return [LambdaLR(opt, factor) for opt in optimizers]


def train_step(
    state: TrainState,
    micro_batches: Sequence[Batch],
    bundle: ModelBundle,
    weights: LossWeights,
    optimizers,
    schedulers,
    config: TrainConfig,
) -> LossReport:
    """One optimizer step over grad_accumulation_steps micro-batches."""
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)

    totals = {"ce": 0.0, "mle": 0.0, "ce_g": 0.0, "dis": 0.0, "total": 0.0}
    tokens = samples = 0
    scale = 1.0 / len(micro_batches) if config.loss_reduction == "mean" else 1.0
    for batch in micro_batches:
        loss, report = compute_losses(
            bundle, batch, weights, config.loss_reduction,
            config.detach_distillation_target,
        )
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step}: {report.to_dict()}"
            )
        (loss * scale).backward()
        for key in ("ce", "mle", "ce_g", "dis", "total"):
            totals[key] += getattr(report, key) * scale
        tokens += report.token_count
        samples += report.sample_count

    for model in (bundle.classifier, bundle.generator):
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    for opt in optimizers:
        opt.step()
    for sched in schedulers:
        sched.step()
    state.step += 1
    return LossReport(
        ce=totals["ce"], mle=totals["mle"], ce_g=totals["ce_g"],
        dis=totals["dis"], total=totals["total"],
        token_count=tokens, sample_count=samples,
    )


def evaluate_accuracy(
    bundle: ModelBundle,
    samples: Sequence[McqaSample | NliSample],
    config: TrainConfig,
    batch_size: int = 32,
) -> float:
    """Dev/test accuracy through the classifier path only."""
    bundle.eval_mode()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = make_batch(
                chunk,
                config.task,
                bundle.classifier_vocab,
                bundle.generator_vocab,
                classifier_mode=config.classifier_mode,
                mixed_supervision=config.mixed_supervision,
                max_seq_len=config.max_seq_len,
            )
            probs = option_distribution(_classifier_scores(bundle, batch))
            correct += int((probs.argmax(dim=-1) == batch.answers).sum())
    return correct / len(samples)


def _seeded_batches(
    samples: Sequence, rng: random.Random, micro_size: int, accumulation: int
):
    order = list(range(len(samples)))
    rng.shuffle(order)
    shuffled = [samples[i] for i in order]
    micro = [
        shuffled[i : i + micro_size] for i in range(0, len(shuffled), micro_size)
    ]
    return [micro[i : i + accumulation] for i in range(0, len(micro), accumulation)]


def fit(
    train_samples: Sequence[McqaSample | NliSample],
    dev_samples: Sequence[McqaSample | NliSample],
    config: TrainConfig,
    bundle: ModelBundle,
    out_dir: str | Path,
    metrics_path: Optional[str | Path] = None,
) -> tuple[TrainState, Path]:
    """Train for config.epochs, keeping the checkpoint with the best dev
    accuracy (evaluated once per epoch); returns the final state and the
    best checkpoint path. Fully reproducible given the seed."""
    if not train_samples or not dev_samples:
        raise TrainingError("train and dev sets must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = out_dir / "best"
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    state = TrainState()

    steps_per_epoch = max(
        1,
        -(-len(train_samples) // (config.batch_size * config.grad_accumulation_steps)),
    )
    optimizers = make_optimizers(bundle, config)
    schedulers = make_schedulers(
        optimizers, max(1, config.epochs * steps_per_epoch), config.warmup_proportion
    )

    def record(event: dict) -> None:
        state.metrics.append(event)
        if metrics_fh:
            metrics_fh.write(json.dumps(event) + "\n")
            metrics_fh.flush()

    def evaluate_and_checkpoint(epoch: int) -> None:
        accuracy = evaluate_accuracy(bundle, dev_samples, config)
        record({"event": "dev_eval", "epoch": epoch, "dev_accuracy": accuracy})
        if accuracy > state.best_dev_accuracy:
            state.best_dev_accuracy = accuracy
            try:
                bundle.save(checkpoint_dir)
                state.best_checkpoint = str(checkpoint_dir)
            except OSError as exc:
                logger.error("checkpoint save failed: %s", exc)

    if config.epochs == 0:
        evaluate_and_checkpoint(epoch=0)
    for epoch in range(1, config.epochs + 1):
        bundle.train_mode()
        for micro_batches in _seeded_batches(
            train_samples, rng, config.batch_size, config.grad_accumulation_steps
        ):
            batches = [
                make_batch(
                    chunk,
                    config.task,
                    bundle.classifier_vocab,
                    bundle.generator_vocab,
                    classifier_mode=config.classifier_mode,
                    mixed_supervision=config.mixed_supervision,
                    max_seq_len=config.max_seq_len,
                )
                for chunk in micro_batches
            ]
            report = train_step(
                state, batches, bundle, config.weights, optimizers, schedulers, config
            )
            record({"event": "step", "step": state.step, **report.to_dict()})
        evaluate_and_checkpoint(epoch)

    if metrics_fh:
        metrics_fh.close()
    return state, checkpoint_dir
