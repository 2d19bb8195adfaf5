"""Transformer text encoder and a distance-biased label graph encoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD, ZERO
from .errors import InvalidConfig, ShapeMismatch
from .taxonomy import LabelHierarchy

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    d_h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 32
    vocab_size: int = 1000
    feedforward_dim: int = 128
    dropout_rate: float = 0.1
    graph_layers: int = 1
    max_distance_bucket: int = 8

    def __post_init__(self):
        for name in ("d_h", "n_layers", "n_heads", "max_len", "vocab_size",
                     "feedforward_dim", "graph_layers", "max_distance_bucket"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if self.d_h % self.n_heads:
            raise InvalidConfig(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.vocab_size <= ZERO:
            raise InvalidConfig("vocab_size must cover the reserved ids")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderOutput(NamedTuple):
    P: torch.Tensor  # (N, n, d_h) token states
    p: torch.Tensor  # (N, d_h) first-token state
    e: torch.Tensor  # (N, n, d_h) token + position embeddings


class MultiHeadAttention(nn.Module):
    def __init__(self, d_h: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_h // n_heads
        self.q = nn.Linear(d_h, d_h)
        # a key bias shifts every logit of a row equally, which softmax ignores
        self.k = nn.Linear(d_h, d_h, bias=False)
        self.v = nn.Linear(d_h, d_h)
        self.o = nn.Linear(d_h, d_h)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None, bias=None):
        """Self-attention over ``x`` of shape (N, n, d_h).

        ``key_padding_mask`` is (N, n), True where a key must be ignored.
        ``bias`` is added to the logits and broadcasts against (N, heads, n, n).
        Returns the output and the (N, heads, n, n) attention weights.
        """
        N, n, _ = x.shape

        def split(t):
            return t.view(N, n, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if bias is not None:
            logits = logits + bias
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).reshape(N, n, -1)
        return self.o(ctx), weights


class EncoderLayer(nn.Module):
    """Post-norm transformer block: attention, then a GELU feedforward."""

    def __init__(self, d_h: int, n_heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d_h, n_heads, dropout)
        self.ln1 = nn.LayerNorm(d_h)
        self.ff1 = nn.Linear(d_h, ff_dim)
        self.ff2 = nn.Linear(ff_dim, d_h)
        self.ln2 = nn.LayerNorm(d_h)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None, bias=None):
        a, weights = self.attn(x, key_padding_mask, bias)
        x = self.ln1(x + self.dropout(a))
        f = self.ff2(self.dropout(F.gelu(self.ff1(x))))
        return self.ln2(x + self.dropout(f)), weights


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        # padding_idx pins the [ZERO] row at zero and blocks its gradient
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_h, padding_idx=ZERO)
        self.pos = nn.Embedding(cfg.max_len, cfg.d_h)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_h, cfg.n_heads, cfg.feedforward_dim, cfg.dropout_rate)
            for _ in range(cfg.n_layers)
        )
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def _check(self, token_ids: torch.Tensor) -> None:
        if token_ids.dim() != 2:
            raise ShapeMismatch(f"expected (N, n) token ids, got shape {tuple(token_ids.shape)}")
        if token_ids.shape[1] > self.cfg.max_len:
            raise ShapeMismatch(f"sequence length {token_ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size):
            raise ShapeMismatch("token id outside the vocabulary")

    def embed(self, token_ids: torch.Tensor, token_scale: torch.Tensor | None = None) -> torch.Tensor:
        """Token plus positional embeddings, before any transformer layer.

        ``token_scale`` (N, n) multiplies each token embedding row; positions
        are left untouched.
        """
        self._check(token_ids)
        tok = self.tok(token_ids)
        if token_scale is not None:
            tok = tok * token_scale.unsqueeze(-1).to(tok.dtype)
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        return tok + self.pos(positions)

    def forward(self, token_ids, token_scale=None, return_attention=False):
        e = self.embed(token_ids, token_scale)
        mask = token_ids == PAD
        x = self.dropout(e)
        attention = []
        for layer in self.layers:
            x, w = layer(x, mask)
            attention.append(w)
        out = EncoderOutput(P=x, p=x[:, 0], e=e)
        return (out, attention) if return_attention else out


class LabelGraphEncoder(nn.Module):
    """Self-attention over label embeddings with a learned tree-distance bias.

    The logit between labels i and j gets a per-head scalar looked up by
    ``min(distance(i, j), max_distance_bucket)``.
    """

    def __init__(self, cfg: EncoderConfig, num_labels: int):
        super().__init__()
        self.cfg = cfg
        self.num_labels = num_labels
        self.label_emb = nn.Embedding(num_labels, cfg.d_h)
        self.distance_bias = nn.Embedding(cfg.max_distance_bucket + 1, cfg.n_heads)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_h, cfg.n_heads, cfg.feedforward_dim, 0.0)
            for _ in range(cfg.graph_layers)
        )

    def forward(self, h: LabelHierarchy, return_attention=False):
        if h.size != self.num_labels:
            raise ShapeMismatch(f"encoder built for {self.num_labels} labels, hierarchy has {h.size}")
        device = self.label_emb.weight.device
        buckets = torch.tensor(h.distance, device=device).clamp(max=self.cfg.max_distance_bucket)
        bias = self.distance_bias(buckets).permute(2, 0, 1).unsqueeze(0)  # (1, heads, C, C)
        x = self.label_emb.weight.unsqueeze(0)
        attention = []
        for layer in self.layers:
            x, w = layer(x, None, bias)
            attention.append(w)
        return (x[0], attention) if return_attention else x[0]


def init_params(module: nn.Module, seed: int, std: float = INIT_STD) -> nn.Module:
    """Re-initialize every parameter of ``module`` deterministically.

    Weight matrices and embedding tables get N(0, std), biases zero, layer
    norms unit gain. The [ZERO] token row is zeroed afterwards.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                param.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias" or leaf.startswith("b_"):
                param.zero_()
            else:
                param.copy_(torch.randn(param.shape, generator=gen, dtype=torch.float64).to(param.dtype) * std)
        for sub in module.modules():
            if isinstance(sub, nn.Embedding) and sub.padding_idx is not None:
                sub.weight[sub.padding_idx].zero_()
    return module


def build_text_encoder(cfg: EncoderConfig, seed: int) -> TextEncoder:
    return init_params(TextEncoder(cfg), seed)


def encode(encoder: TextEncoder, token_ids: torch.Tensor, train_mode: bool = False) -> EncoderOutput:
    was_training = encoder.training
    encoder.train(train_mode)
    try:
        return encoder(token_ids)
    finally:
        encoder.train(was_training)


def embed_tokens(encoder: TextEncoder, token_ids: torch.Tensor) -> torch.Tensor:
    return encoder.embed(token_ids)


def label_graph_encode(label_encoder: LabelGraphEncoder, h: LabelHierarchy) -> torch.Tensor:
    return label_encoder(h)
