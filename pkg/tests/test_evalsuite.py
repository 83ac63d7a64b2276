"""Metric correctness: accuracy, corpus BLEU vs an independent oracle,
and the simulatability probe plumbing."""

from __future__ import annotations

import math
import random

import pytest

from explainkit.errors import EvalError
from explainkit.evalsuite import EvalReport, accuracy, corpus_bleu, simulatability


# ---------------------------------------------------------------------------
# independent BLEU oracle (second implementation, structured per segment)
# ---------------------------------------------------------------------------


def oracle_bleu(candidates, references):
    """Corpus BLEU computed segment-wise with explicit clipping loops."""
    stats = {n: [0, 0] for n in (1, 2, 3, 4)}  # n -> [clipped matches, total]
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_tokens = cand.split()
        cand_len += len(cand_tokens)
        ref_lengths = [len(r.split()) for r in refs]
        best = None
        for rl in ref_lengths:
            key = (abs(rl - len(cand_tokens)), rl)
            if best is None or key < best:
                best = key
        ref_len += best[1]
        for n in (1, 2, 3, 4):
            grams = [
                tuple(cand_tokens[i : i + n])
                for i in range(len(cand_tokens) - n + 1)
            ]
            stats[n][1] += len(grams)
            clipped = 0
            for gram in set(grams):
                occurrences = grams.count(gram)
                max_in_refs = 0
                for ref in refs:
                    ref_tokens = ref.split()
                    ref_grams = [
                        tuple(ref_tokens[i : i + n])
                        for i in range(len(ref_tokens) - n + 1)
                    ]
                    max_in_refs = max(max_in_refs, ref_grams.count(gram))
                clipped += min(occurrences, max_in_refs)
            stats[n][0] += clipped

    logs = []
    for n in (1, 2, 3, 4):
        clipped, total = stats[n]
        if total == 0:
            continue
        if clipped == 0:
            if n == 1:
                return 0.0
            logs.append(math.log(1.0 / (total + 1.0)))
        else:
            logs.append(math.log(clipped / total))
    if not logs or cand_len == 0:
        return 0.0
    geo = math.exp(sum(logs) / len(logs))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * geo * bp


class TestAccuracy:
    def test_basic(self):
        assert accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)

    def test_mismatched_lengths(self):
        with pytest.raises(EvalError):
            accuracy([1], [1, 2])

    def test_empty(self):
        with pytest.raises(EvalError):
            accuracy([], [])


class TestBleu:
    def test_exact_match_is_100(self):
        assert corpus_bleu(["a b c d e"], [["a b c d e"]]) == pytest.approx(100.0)

    def test_disjoint_is_zero(self):
        assert corpus_bleu(["a b c"], [["x y z"]]) == 0.0

    def test_matches_oracle_on_random_cases(self):
        rng = random.Random(11)
        vocab = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "far"]
        for _ in range(30):
            candidates = []
            references = []
            for _ in range(rng.randint(1, 5)):
                candidates.append(
                    " ".join(rng.choices(vocab, k=rng.randint(1, 12)))
                )
                references.append(
                    [
                        " ".join(rng.choices(vocab, k=rng.randint(1, 12)))
                        for _ in range(rng.randint(1, 3))
                    ]
                )
            assert corpus_bleu(candidates, references) == pytest.approx(
                oracle_bleu(candidates, references), abs=1e-6
            )

    def test_brevity_penalty(self):
        # candidate shorter than the reference gets penalized
        long_ref = ["a b c d e f"]
        short = corpus_bleu(["a b c"], [long_ref])
        full = corpus_bleu(["a b c d e f"], [long_ref])
        assert short < full

    def test_closest_ref_length_ties_to_shorter(self):
        # candidate length 3; refs of length 2 and 4 tie on distance
        value = corpus_bleu(["a b c"], [["a b", "a b c d"]])
        oracle = oracle_bleu(["a b c"], [["a b", "a b c d"]])
        assert value == pytest.approx(oracle, abs=1e-9)

    def test_multi_reference_clipping(self):
        value = corpus_bleu(["the the the"], [["the cat", "the dog the"]])
        assert value == pytest.approx(oracle_bleu(["the the the"], [["the cat", "the dog the"]]), abs=1e-9)

    def test_misaligned_inputs(self):
        with pytest.raises(EvalError):
            corpus_bleu(["a"], [])

    def test_empty_reference_list(self):
        with pytest.raises(EvalError):
            corpus_bleu(["a"], [[]])

    def test_whitespace_normalized(self):
        assert corpus_bleu(["a   b\tc"], [["a b c"]]) == pytest.approx(100.0)


class TestReport:
    def test_to_dict(self):
        report = EvalReport(accuracy=0.5, counts={"n": 2})
        data = report.to_dict()
        assert data["accuracy"] == 0.5
        assert data["bleu"] is None
        assert data["counts"] == {"n": 2}


class TestSimulatabilityContracts:
    def test_requires_evidence(self, mcqa_sample):
        import dataclasses

        from explainkit.netcore import ModelConfig
        from explainkit.trainer import TrainConfig

        bare = dataclasses.replace(mcqa_sample, evidence=None)
        with pytest.raises(EvalError):
            simulatability(
                [bare], [(mcqa_sample, "text")], ModelConfig(K=3), TrainConfig()
            )

    def test_rejects_zero_probes(self, mcqa_sample):
        from explainkit.netcore import ModelConfig
        from explainkit.trainer import TrainConfig

        with pytest.raises(EvalError):
            simulatability(
                [mcqa_sample], [(mcqa_sample, "text")], ModelConfig(K=3),
                TrainConfig(), num_probes=0,
            )
