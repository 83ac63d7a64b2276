"""Beam-search generation with repetition penalty and stopping rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .netcore import GeneratorModel
from .tokenizer import CLS_ID, EOS_ID


@dataclass
class DecodeConfig:
    beams: int = 20
    max_len: int = 200
    repetition_penalty: float = 1.5
    num_return: int = 1
    length_normalization_alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.repetition_penalty < 1.0:
            raise ValueError(
                f"repetition penalty must be >= 1, got {self.repetition_penalty}"
            )
        if not 1 <= self.num_return <= self.beams:
            raise ValueError("num_return must be in [1, beams]")


@dataclass
class Hypothesis:
    """One (partial) decode: generated ids exclude the begin symbol."""

    ids: list[int] = field(default_factory=list)
    log_prob: float = 0.0
    finished: bool = False

    def normalized_score(self, alpha: float) -> float:
        if alpha > 0 and self.ids:
            return self.log_prob / (len(self.ids) ** alpha)
        return self.log_prob


def apply_repetition_penalty(
    logits: Tensor, generated_ids: set[int], theta: float
) -> Tensor:
    """Discount logits of already-generated tokens.

    Positive logits are divided by theta, negative ones multiplied, so the
    token is penalized regardless of sign. Never touches tokens that have
    not been generated.
    """
    if theta < 1.0:
        raise ValueError(f"repetition penalty must be >= 1, got {theta}")
    if theta == 1.0 or not generated_ids:
        return logits
    out = logits.clone()
    idx = torch.tensor(sorted(generated_ids), dtype=torch.long, device=logits.device)
    values = out[idx]
    out[idx] = torch.where(values > 0, values / theta, values * theta)
    return out


def _step_log_probs(
    generator: GeneratorModel,
    memory: Tensor,
    src_pad_mask: Tensor | None,
    prefixes: list[list[int]],
) -> Tensor:
    """Next-token log-probabilities for each BOS-prefixed hypothesis."""
    tgt_in = torch.tensor(
        [[CLS_ID] + p for p in prefixes], dtype=torch.long, device=memory.device
    )
    batch = tgt_in.size(0)
    states = generator.decode_states(
        tgt_in,
        memory.expand(batch, -1, -1),
        src_pad_mask.expand(batch, -1) if src_pad_mask is not None else None,
    )
    return generator.token_proj(states[:, -1])


def beam_search(
    generator: GeneratorModel, src_ids: Tensor, config: DecodeConfig
) -> list[Hypothesis]:
    """Deterministic beam search over the penalized token distribution.

    A beam finishes on EOS or at max_len; decoding ends when the best live
    score cannot beat the worst kept finished score. Ties break by lower
    token id, then earlier beam index. Returns num_return hypotheses
    sorted by (length-normalized) score, descending.
    """
    if src_ids.dim() == 1:
        src_ids = src_ids.unsqueeze(0)
    alpha = config.length_normalization_alpha
    with torch.no_grad():
        src_pad_mask = src_ids == 0
        if not src_pad_mask.any():
            src_pad_mask = None
        memory = generator.encoder(src_ids, src_pad_mask)

        live = [Hypothesis()]
        finished: list[Hypothesis] = []
        for _ in range(config.max_len):
            logits = _step_log_probs(
                generator, memory, src_pad_mask, [h.ids for h in live]
            )
            candidates: list[tuple[float, int, int]] = []
            for beam_index, hyp in enumerate(live):
                penalized = apply_repetition_penalty(
                    logits[beam_index], set(hyp.ids), config.repetition_penalty
                )
                log_probs = torch.log_softmax(penalized, dim=-1)
                for token_id, lp in enumerate(log_probs.tolist()):
                    candidates.append((hyp.log_prob + lp, token_id, beam_index))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

            next_live = []
            for score, token_id, beam_index in candidates[: config.beams]:
                hyp = Hypothesis(
                    ids=live[beam_index].ids + [token_id], log_prob=score
                )
                if token_id == EOS_ID:
                    hyp.finished = True
                    finished.append(hyp)
                else:
                    next_live.append(hyp)
            live = next_live
            if not live:
                break
            if len(finished) >= config.num_return:
                worst_kept = sorted(
                    (h.normalized_score(alpha) for h in finished), reverse=True
                )[config.num_return - 1]
                best_live = max(h.normalized_score(alpha) for h in live)
                if best_live <= worst_kept:
                    break

        for hyp in live:  # hit max_len without EOS
            hyp.finished = True
            finished.append(hyp)

        finished.sort(key=lambda h: -h.normalized_score(alpha))
        return finished[: config.num_return]


def greedy_decode(generator: GeneratorModel, src_ids: Tensor, config: DecodeConfig) -> Hypothesis:
    """Beam-1 decoding; identical to beam_search with beams=1."""
    cfg = DecodeConfig(
        beams=1,
        max_len=config.max_len,
        repetition_penalty=config.repetition_penalty,
        num_return=1,
        length_normalization_alpha=config.length_normalization_alpha,
    )
    return beam_search(generator, src_ids, cfg)[0]
