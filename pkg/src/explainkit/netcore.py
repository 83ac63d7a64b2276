"""Reference tiny classifier encoder and generator encoder-decoder.

These stand in for external pre-trained models: pre-norm self-attention
blocks with sinusoidal position encodings, small enough to train on a CPU
and deterministic in eval mode. The three learned heads are the per-option
scoring head (W2 tanh(W1 h + b1)), the token projection of the decoder
states, and the K-way label head max-pooled over decoder time steps.

The classifier and generator share no parameters and may use separate
vocabularies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
from torch import Tensor, nn

from .errors import LossError
from .tokenizer import PAD_ID, Vocab


@dataclass
class ModelConfig:
    d: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 256
    classifier_vocab_size: int = 0
    generator_vocab_size: int = 0
    K: int = 2
    dropout: float = 0.1
    max_positions: int = 512
    task: str = "mcqa"  # mcqa: per-option scalar scoring; nli: K-way head

    def __post_init__(self) -> None:
        if self.task not in ("mcqa", "nli"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.d % self.num_heads != 0:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> Tensor:
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=dtype) * (-math.log(10000.0) / d))
    enc = torch.zeros(length, d, dtype=dtype)
    enc[:, 0::2] = torch.sin(position * div)
    enc[:, 1::2] = torch.cos(position * div[: d // 2])
    return enc


def padding_mask(ids: Tensor) -> Tensor:
    """True at PAD positions (key_padding_mask convention)."""
    return ids == PAD_ID


class PreNormBlock(nn.Module):
    """Pre-norm self-attention block with optional cross-attention."""

    def __init__(self, config: ModelConfig, cross_attention: bool = False):
        super().__init__()
        self.norm_self = nn.LayerNorm(config.d)
        self.self_attn = nn.MultiheadAttention(
            config.d, config.num_heads, dropout=config.dropout, batch_first=True
        )
        self.cross_attn = None
        if cross_attention:
            self.norm_cross = nn.LayerNorm(config.d)
            self.cross_attn = nn.MultiheadAttention(
                config.d, config.num_heads, dropout=config.dropout, batch_first=True
            )
        self.norm_ffn = nn.LayerNorm(config.d)
        self.ffn = nn.Sequential(
            nn.Linear(config.d, config.ffn_size),
            nn.GELU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.ffn_size, config.d),
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(
        self,
        x: Tensor,
        self_pad_mask: Tensor | None = None,
        causal_mask: Tensor | None = None,
        memory: Tensor | None = None,
        memory_pad_mask: Tensor | None = None,
    ) -> Tensor:
        h = self.norm_self(x)
        attn, _ = self.self_attn(
            h, h, h,
            key_padding_mask=self_pad_mask,
            attn_mask=causal_mask,
            need_weights=False,
        )
        x = x + self.dropout(attn)
        if self.cross_attn is not None:
            h = self.norm_cross(x)
            attn, _ = self.cross_attn(
                h, memory, memory,
                key_padding_mask=memory_pad_mask,
                need_weights=False,
            )
            x = x + self.dropout(attn)
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(vocab_size, config.d, padding_idx=PAD_ID)
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_positions, config.d)
        )
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            PreNormBlock(config) for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(config.d)

    def forward(self, ids: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        if ids.size(1) > self.config.max_positions:
            raise ValueError(
                f"sequence length {ids.size(1)} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        x = self.embed(ids) + self.positions[: ids.size(1)].to(self.embed.weight.dtype)
        x = self.dropout(x)
        for block in self.blocks:
            x = block(x, self_pad_mask=pad_mask)
        return self.final_norm(x)


class PredictionHead(nn.Module):
    """Scoring head: score = W2 tanh(W1 h + b1), no outer bias.

    ``out_dim`` is 1 for per-option MCQA scoring and K for the NLI
    single-input K-way variant.
    """

    def __init__(self, d: int, out_dim: int = 1):
        super().__init__()
        self.inner = nn.Linear(d, d)
        self.outer = nn.Linear(d, out_dim, bias=False)

    def forward(self, h: Tensor) -> Tensor:
        out = self.outer(torch.tanh(self.inner(h)))
        return out.squeeze(-1) if out.size(-1) == 1 else out


class ClassifierModel(nn.Module):
    """Encoder plus scoring head; scores one rendered option input."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config, config.classifier_vocab_size)
        self.head = PredictionHead(config.d, 1 if config.task == "mcqa" else config.K)

    def encode_first_token(self, ids: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        """Last-layer hidden state at position 0 (the CLS slot)."""
        return self.encoder(ids, pad_mask)[:, 0]

    def forward(self, ids: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        """Per-instance scalar scores, shape (batch,)."""
        return self.head(self.encode_first_token(ids, pad_mask))

    def option_scores(self, ids: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        """Scores for instances grouped per sample: (N, K, L) -> (N, K)."""
        n, k, length = ids.shape
        flat_mask = pad_mask.reshape(n * k, length) if pad_mask is not None else None
        return self(ids.reshape(n * k, length), flat_mask).reshape(n, k)


def option_distribution(scores: Tensor) -> Tensor:
    """Normalize per-option scores into a probability vector (stable softmax)."""
    return torch.softmax(scores, dim=-1)


class GeneratorLabelHead(nn.Module):
    """Projects each decoder state to K label logits, max-pooled over time."""

    def __init__(self, d: int, k: int):
        super().__init__()
        self.proj = nn.Linear(d, k)

    def forward(self, states: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        """(N, T, d) decoder states -> (N, K) label logits.

        Padded positions are excluded from the max; ties route the
        subgradient to the earliest time step.
        """
        logits = self.proj(states)
        if pad_mask is not None:
            if bool(pad_mask.all(dim=1).any()):
                raise LossError("label head pooling needs >= 1 unmasked position")
            logits = logits.masked_fill(pad_mask.unsqueeze(-1), float("-inf"))
        return logits.max(dim=1).values


class GeneratorModel(nn.Module):
    """Encoder-decoder with a token projection and a pooled label head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config, config.generator_vocab_size)
        self.embed = nn.Embedding(config.generator_vocab_size, config.d, padding_idx=PAD_ID)
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_positions, config.d)
        )
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            PreNormBlock(config, cross_attention=True)
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(config.d)
        self.token_proj = nn.Linear(config.d, config.generator_vocab_size)
        self.label_head = GeneratorLabelHead(config.d, config.K)

    def forward(
        self,
        src_ids: Tensor,
        tgt_in_ids: Tensor,
        src_pad_mask: Tensor | None = None,
        tgt_pad_mask: Tensor | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Teacher-forced forward pass.

        ``tgt_in_ids`` is the shifted-right target (begin symbol first).
        Returns per-step token logits (N, T, V) and the decoder last-layer
        states (N, T, d) for the label head. Causal masking guarantees the
        logits at step t depend only on src and tgt_in[<= t].
        """
        memory = self.encoder(src_ids, src_pad_mask)
        states = self.decode_states(tgt_in_ids, memory, src_pad_mask, tgt_pad_mask)
        return self.token_proj(states), states

    def decode_states(
        self,
        tgt_in_ids: Tensor,
        memory: Tensor,
        src_pad_mask: Tensor | None = None,
        tgt_pad_mask: Tensor | None = None,
    ) -> Tensor:
        """Decoder stack over a teacher-forced prefix given encoded memory."""
        t = tgt_in_ids.size(1)
        if t > self.config.max_positions:
            raise ValueError(
                f"target length {t} exceeds max_positions {self.config.max_positions}"
            )
        causal = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=tgt_in_ids.device), diagonal=1
        )
        x = self.embed(tgt_in_ids) + self.positions[:t].to(memory.dtype)
        x = self.dropout(x)
        for block in self.blocks:
            x = block(
                x,
                self_pad_mask=tgt_pad_mask,
                causal_mask=causal,
                memory=memory,
                memory_pad_mask=src_pad_mask,
            )
        return self.final_norm(x)

    def label_logits(self, states: Tensor, tgt_pad_mask: Tensor | None = None) -> Tensor:
        return self.label_head(states, tgt_pad_mask)


@dataclass
class ModelBundle:
    """The two jointly trained components plus their vocabularies."""

    config: ModelConfig
    classifier: ClassifierModel
    generator: GeneratorModel
    classifier_vocab: Vocab
    generator_vocab: Vocab

    @classmethod
    def create(
        cls, config: ModelConfig, classifier_vocab: Vocab, generator_vocab: Vocab
    ) -> "ModelBundle":
        config.classifier_vocab_size = len(classifier_vocab)
        config.generator_vocab_size = len(generator_vocab)
        return cls(
            config=config,
            classifier=ClassifierModel(config),
            generator=GeneratorModel(config),
            classifier_vocab=classifier_vocab,
            generator_vocab=generator_vocab,
        )

    def train_mode(self) -> None:
        self.classifier.train()
        self.generator.train()

    def eval_mode(self) -> None:
        self.classifier.eval()
        self.generator.eval()

    def parameters(self):
        yield from self.classifier.parameters()
        yield from self.generator.parameters()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"format_version": 1, "config": asdict(self.config)}
        (directory / "config.json").write_text(json.dumps(meta, indent=2))
        self.classifier_vocab.save(directory / "classifier_vocab.txt")
        self.generator_vocab.save(directory / "generator_vocab.txt")
        torch.save(self.classifier.state_dict(), directory / "classifier.pt")
        torch.save(self.generator.state_dict(), directory / "generator.pt")

    @classmethod
    def load(cls, directory: str | Path) -> "ModelBundle":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        config = ModelConfig(**meta["config"])
        bundle = cls(
            config=config,
            classifier=ClassifierModel(config),
            generator=GeneratorModel(config),
            classifier_vocab=Vocab.load(directory / "classifier_vocab.txt"),
            generator_vocab=Vocab.load(directory / "generator_vocab.txt"),
        )
        bundle.classifier.load_state_dict(
            torch.load(directory / "classifier.pt", weights_only=True)
        )
        bundle.generator.load_state_dict(
            torch.load(directory / "generator.pt", weights_only=True)
        )
        bundle.eval_mode()
        return bundle
