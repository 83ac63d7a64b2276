"""Shared fixtures: tiny deterministic models and sample data."""

from __future__ import annotations

import torch
import pytest

from explainkit.corpus import McqaSample, NliSample
from explainkit.netcore import ModelBundle, ModelConfig
from explainkit.tokenizer import SPECIAL_TOKENS, Vocab


def tiny_vocab(extra: int = 6) -> Vocab:
    return Vocab(SPECIAL_TOKENS + tuple(f"w{i}" for i in range(extra)))


def tiny_bundle(
    seed: int = 0,
    d: int = 8,
    k: int = 3,
    vocab_size: int = 11,
    num_layers: int = 1,
    task: str = "mcqa",
) -> ModelBundle:
    torch.manual_seed(seed)
    vocab = tiny_vocab(vocab_size - len(SPECIAL_TOKENS))
    config = ModelConfig(
        d=d, num_layers=num_layers, num_heads=2, ffn_size=2 * d,
        K=k, dropout=0.0, task=task,
    )
    return ModelBundle.create(config, vocab, vocab)


@pytest.fixture
def mcqa_sample() -> McqaSample:
    return McqaSample(
        id="s1",
        question="why is the sky blue",
        options=["scattering", "mirrors", "paint"],
        answer_index=0,
        evidence=["light scatters", "no mirrors", "no paint"],
        explanation="short wavelengths scatter more",
    )


@pytest.fixture
def nli_sample() -> NliSample:
    return NliSample(
        id="n1",
        premise="a dog runs in a field",
        hypothesis="an animal is outside",
        label="entailment",
        explanations=["a dog is an animal", "fields are outside"],
    )
