"""Synthetic copy-key MCQA benchmark.

Each question embeds a key token; every option carries a one-token
evidence snippet and only the correct option's evidence matches the
question's key. The gold explanation names the correct option and the
key, so an explanation alone suffices to recover the answer (the
simulatability probe setting). Option names and keys are drawn from one
shared token pool so cross-segment token matching generalizes between
the two input formats.

``decisive_prob`` < 1 makes the evidence only partially decisive: with
probability 1 - decisive_prob all evidence tokens are unrelated
distractors, capping what the classifier alone can learn.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .corpus import McqaSample


@dataclass
class SyntheticConfig:
    n_train: int = 2000
    n_dev: int = 200
    num_options: int = 4
    vocab: int = 64
    seed: int = 7
    decisive_prob: float = 1.0
    max_filler: int = 2


def _make_sample(index: int, rng: random.Random, config: SyntheticConfig) -> McqaSample:
    pool = [f"t{i:02d}" for i in range(config.vocab)]
    k = config.num_options
    drawn = rng.sample(pool, 2 * k)
    names, keys = drawn[:k], drawn[k:]
    answer = rng.randrange(k)

    filler = [f"f{rng.randrange(4)}" for _ in range(rng.randint(0, config.max_filler))]
    question = " ".join(filler + ["q", keys[answer]])

    if rng.random() < config.decisive_prob:
        evidence = list(keys)
    else:
        distractors = [t for t in pool if t not in keys and t not in names]
        evidence = [rng.choice(distractors) for _ in range(k)]

    # the index letter makes the explanation -> label mapping direct, so the
    # generator label head can learn it from teacher-forced targets
    letter = "ABCDEFGH"[answer]
    explanation = f"answer {letter} {names[answer]} because {keys[answer]}"
    return McqaSample(
        id=f"syn-{index:05d}",
        question=question,
        options=names,
        answer_index=answer,
        evidence=evidence,
        explanation=explanation,
    )


def generate_copy_key(
    config: SyntheticConfig,
) -> tuple[list[McqaSample], list[McqaSample]]:
    """Deterministic train/dev splits for the given seed."""
    rng = random.Random(config.seed)
    train = [_make_sample(i, rng, config) for i in range(config.n_train)]
    dev = [
        _make_sample(config.n_train + i, rng, config) for i in range(config.n_dev)
    ]
    return train, dev
