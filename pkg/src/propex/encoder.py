"""Marker-structured token layout and a small trainable transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import torch
from torch import nn

from .corpus import Instance, MASK_TOKEN

QUERY_MARKER = "[CLS_Q]"
SENTENCE_MARKER = "[CLS_S]"
SEPARATOR = "[SEP]"
UNKNOWN = "[UNK]"
SPECIAL_TOKENS = (UNKNOWN, MASK_TOKEN, QUERY_MARKER, SENTENCE_MARKER, SEPARATOR)

DTYPE = torch.float64


class EncodingError(ValueError):
    """Instance cannot be laid out or encoded under the current configuration."""


class Vocab:
    """Token-to-id mapping with the special tokens pinned to the lowest ids."""

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for tok in SPECIAL_TOKENS:
            if tok not in self._index:
                raise ValueError(f"vocabulary is missing special token {tok!r}")

    @classmethod
    def build(cls, instances: Iterable[Instance]) -> "Vocab":
        seen: set[str] = set()
        for inst in instances:
            seen.update(inst.query)
            if inst.answer is not None:
                seen.update(inst.answer)
            for sent in inst.sentences:
                seen.update(sent)
        seen -= set(SPECIAL_TOKENS)
        return cls([*SPECIAL_TOKENS, *sorted(seen)])

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @property
    def mask_id(self) -> int:
        return self._index[MASK_TOKEN]

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNKNOWN])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(tok) for tok in tokens]


@dataclass(frozen=True)
class EncoderInput:
    """Token ids plus the marker positions the joint model reads from."""

    token_ids: tuple[int, ...]
    query_marker_pos: int
    sentence_marker_pos: tuple[int, ...]

    def __post_init__(self) -> None:
        positions = (self.query_marker_pos, *self.sentence_marker_pos)
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise EncodingError("marker positions must be strictly increasing")
        if positions and positions[-1] >= len(self.token_ids):
            raise EncodingError("marker position beyond sequence end")

    @property
    def length(self) -> int:
        return len(self.token_ids)


def layout(instance: Instance, vocab: Vocab, max_len: int | None = None) -> EncoderInput:
    """Lay out an instance as ``[Q] query [SEP] (answer [SEP]) ([S] sentence)*``.

    Truncation is never performed here; overlong sequences are the encoder's
    concern (windowing), but an instance whose markers alone cannot fit is
    rejected outright.
    """
    if max_len is not None and 1 + instance.num_sentences > max_len:
        raise EncodingError(
            f"instance {instance.id!r}: {1 + instance.num_sentences} marker tokens "
            f"alone exceed max length {max_len}"
        )
    tokens: list[str] = [QUERY_MARKER, *instance.query, SEPARATOR]
    if instance.answer is not None:
        tokens += [*instance.answer, SEPARATOR]
    sentence_positions = []
    for sent in instance.sentences:
        sentence_positions.append(len(tokens))
        tokens += [SENTENCE_MARKER, *sent]
    return EncoderInput(
        token_ids=tuple(vocab.encode(tokens)),
        query_marker_pos=0,
        sentence_marker_pos=tuple(sentence_positions),
    )


@dataclass
class EncoderConfig:
    """Architecture and windowing hyperparameters for the transformer encoder."""

    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int | None = None  # defaults to 4 * hidden_size
    max_seq_len: int = 512
    window_size: int | None = None
    window_stride: int | None = None
    dropout: float = 0.0
    vocab: Vocab | None = None
    pretrained_path: str | None = None

    def __post_init__(self) -> None:
        if self.hidden_size % self.num_heads != 0:
            raise EncodingError("hidden_size must be divisible by num_heads")
        if self.window_size is not None:
            if self.window_stride is None:
                raise EncodingError("window_size set without window_stride")
            if not 0 < self.window_stride < self.window_size:
                raise EncodingError("window_stride must satisfy 0 < stride < size")
            if self.window_size > self.max_seq_len:
                raise EncodingError("window_size must not exceed max_seq_len")

    @property
    def resolved_ffn_size(self) -> int:
        return self.ffn_size if self.ffn_size is not None else 4 * self.hidden_size

    def with_vocab(self, vocab: Vocab) -> "EncoderConfig":
        return replace(self, vocab=vocab)


def encoder_config_to_dict(config: EncoderConfig) -> dict:
    return {
        "hidden_size": config.hidden_size,
        "num_layers": config.num_layers,
        "num_heads": config.num_heads,
        "ffn_size": config.ffn_size,
        "max_seq_len": config.max_seq_len,
        "window_size": config.window_size,
        "window_stride": config.window_stride,
        "dropout": config.dropout,
        "vocab_tokens": None if config.vocab is None else config.vocab.tokens,
        "pretrained_path": config.pretrained_path,
    }


def encoder_config_from_dict(data: dict) -> EncoderConfig:
    tokens = data.get("vocab_tokens")
    return EncoderConfig(
        hidden_size=data["hidden_size"],
        num_layers=data["num_layers"],
        num_heads=data["num_heads"],
        ffn_size=data["ffn_size"],
        max_seq_len=data["max_seq_len"],
        window_size=data["window_size"],
        window_stride=data["window_stride"],
        dropout=data["dropout"],
        vocab=None if tokens is None else Vocab(tokens),
        pretrained_path=data.get("pretrained_path"),
    )


def window_spans(
    length: int, size: int, stride: int, marker_positions: Iterable[int] = ()
) -> list[tuple[int, int]]:
    """Half-open window spans covering ``[0, length)`` with overlap ``size - stride``.

    A non-final window never ends immediately after a marker: a marker split
    from its first sentence token would be encoded without any of its sentence
    in context, so such windows are shrunk and the marker handled by the next
    window (which always reaches it because stride < size).
    """
    if length <= 0:
        raise EncodingError("cannot window an empty sequence")
    markers = set(marker_positions)
    spans: list[tuple[int, int]] = []
    start = 0
    while True:
        end = min(start + size, length)
        if end < length:
            while end - 1 in markers and end - 1 > start:
                end -= 1
        spans.append((start, end))
        if end >= length:
            break
        start += stride
        if start >= end:
            raise EncodingError(
                "window shrinking around markers broke coverage; "
                "increase window_size - window_stride overlap"
            )
    return spans


def combine_window_outputs(
    spans: Sequence[tuple[int, int]], outputs: Sequence[torch.Tensor], length: int
) -> torch.Tensor:
    """Elementwise mean of window outputs over overlaps; single coverage passes through."""
    hidden = outputs[0].shape[-1]
    total = outputs[0].new_zeros((length, hidden))
    counts = outputs[0].new_zeros((length, 1))
    for (start, end), out in zip(spans, outputs):
        total[start:end] += out
        counts[start:end] += 1.0
    if (counts == 0).any():
        raise EncodingError("window spans leave positions uncovered")
    return total / counts


class _EncoderLayer(nn.Module):
    """Pre-norm self-attention block with a GELU feed-forward."""

    def __init__(self, hidden_size: int, num_heads: int, ffn_size: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.attn_norm = nn.LayerNorm(hidden_size)
        self.qkv = nn.Linear(hidden_size, 3 * hidden_size)
        self.attn_out = nn.Linear(hidden_size, hidden_size)
        self.ffn_norm = nn.LayerNorm(hidden_size)
        self.ffn_in = nn.Linear(hidden_size, ffn_size)
        self.ffn_out = nn.Linear(ffn_size, hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[0]
        h = self.attn_norm(x)
        qkv = self.qkv(h).view(length, 3, self.num_heads, self.head_dim)
        q, k, v = (t.squeeze(1).permute(1, 0, 2) for t in qkv.chunk(3, dim=1))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        context = torch.softmax(scores, dim=-1) @ v
        context = context.permute(1, 0, 2).reshape(length, -1)
        x = x + self.dropout(self.attn_out(context))
        h = self.ffn_norm(x)
        x = x + self.dropout(self.ffn_out(torch.nn.functional.gelu(self.ffn_in(h))))
        return x


class TransformerEncoder(nn.Module):
    """Small transformer over marker-structured sequences, float64 throughout.

    Positional embeddings are learned and window-local: windowed encoding
    reuses positions ``0..window-1`` inside every window.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.vocab is None:
            raise EncodingError("encoder requires a bound vocabulary")
        self.config = config
        self.token_embedding = nn.Embedding(len(config.vocab), config.hidden_size)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.hidden_size)
        self.layers = nn.ModuleList(
            _EncoderLayer(
                config.hidden_size,
                config.num_heads,
                config.resolved_ffn_size,
                config.dropout,
            )
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(config.hidden_size)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.double()
        if config.pretrained_path is not None:
            payload = torch.load(config.pretrained_path, weights_only=True)
            state = payload.get("model_state", payload)
            encoder_state = {
                key.removeprefix("encoder."): value
                for key, value in state.items()
                if key.startswith("encoder.")
            }
            self.load_state_dict(encoder_state or state)

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def _run(self, token_ids: Sequence[int]) -> torch.Tensor:
        device = self.token_embedding.weight.device
        ids = torch.as_tensor(token_ids, dtype=torch.long, device=device)
        positions = torch.arange(len(token_ids), dtype=torch.long, device=device)
        x = self.token_embedding(ids) + self.position_embedding(positions)
        x = self.embed_dropout(x)
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)

    def encode(self, enc_input: EncoderInput) -> torch.Tensor:
        """Single-pass encoding; rejects sequences beyond the positional table."""
        if enc_input.length > self.config.max_seq_len:
            raise EncodingError(
                f"sequence length {enc_input.length} exceeds max_seq_len "
                f"{self.config.max_seq_len} and windowing is not in effect"
            )
        return self._run(enc_input.token_ids)

    def windowed_encode(self, enc_input: EncoderInput) -> torch.Tensor:
        """Encode overlapping windows independently and average overlap regions."""
        if self.config.window_size is None:
            raise EncodingError("windowed_encode requires window_size in the config")
        markers = (enc_input.query_marker_pos, *enc_input.sentence_marker_pos)
        spans = window_spans(
            enc_input.length,
            self.config.window_size,
            self.config.window_stride,
            markers,
        )
        outputs = [self._run(enc_input.token_ids[start:end]) for start, end in spans]
        return combine_window_outputs(spans, outputs, enc_input.length)

    def forward(self, enc_input: EncoderInput) -> torch.Tensor:
        if (
            self.config.window_size is not None
            and enc_input.length > self.config.window_size
        ):
            return self.windowed_encode(enc_input)
        return self.encode(enc_input)

    def marker_states(
        self, hidden: torch.Tensor, enc_input: EncoderInput
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Extract the query-marker vector and the S sentence-marker vectors."""
        query_state = hidden[enc_input.query_marker_pos]
        sentence_states = hidden[list(enc_input.sentence_marker_pos)]
        return query_state, sentence_states
