"""Positive-sample construction, projection head and the NT-Xent loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import CLS, PAD, SEP, ZERO
from .errors import EmptyLabelSet, InvalidTemperature, ShapeMismatch, ZeroNormVector


class TokenLabelSampler(nn.Module):
    """Query/key maps used to score tokens against label features."""

    def __init__(self, d_h: int):
        super().__init__()
        self.W_Q = nn.Parameter(torch.empty(d_h, d_h))
        self.W_K = nn.Parameter(torch.empty(d_h, d_h))

    def forward(self, e: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
        return token_label_attention(e, L, self.W_Q, self.W_K)


class ProjectionHead(nn.Module):
    """c = W_2 ReLU(W_1 p), no biases."""

    def __init__(self, d_h: int):
        super().__init__()
        self.W_1 = nn.Parameter(torch.empty(d_h, d_h))
        self.W_2 = nn.Parameter(torch.empty(d_h, d_h))

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return project(self.W_1, self.W_2, p)


def token_label_attention(e, L, W_Q, W_K):
    """Scaled dot-product scores between token embeddings and label features.

    ``e`` is (..., n, d_h) and ``L`` is (C, d_h); returns (..., n, C).
    """
    d_h = e.shape[-1]
    if L.shape[-1] != d_h or W_Q.shape != (d_h, d_h) or W_K.shape != (d_h, d_h):
        raise ShapeMismatch(f"e {tuple(e.shape)}, L {tuple(L.shape)}, W_Q {tuple(W_Q.shape)}, W_K {tuple(W_K.shape)}")
    return (e @ W_Q) @ (L @ W_K).transpose(-1, -2) / math.sqrt(d_h)


def gumbel_softmax_rows(scores: torch.Tensor, temperature: float = 1.0,
                        generator: torch.Generator | int | None = None,
                        noise_enabled: bool = True) -> torch.Tensor:
    """Row-wise softmax of ``(scores + g) / temperature`` with Gumbel noise g.

    ``generator`` may be a ``torch.Generator`` or an integer seed.
    """
    if not temperature > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    if noise_enabled:
        if not isinstance(generator, torch.Generator):
            generator = torch.Generator().manual_seed(0 if generator is None else int(generator))
        expo = torch.empty(scores.shape, dtype=torch.float64).exponential_(generator=generator)
        scores = scores - torch.log(expo).to(scores.dtype)
    return torch.softmax(scores / temperature, dim=-1)


def keep_probability(P: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sum of each token's probabilities over the ground-truth labels.

    ``P`` is (..., n, C) and ``y`` a 0/1 mask (..., C). An empty label set
    yields zeros; use :func:`keep_probability_strict` to reject it instead.
    """
    return (P * y.unsqueeze(-2).to(P.dtype)).sum(-1)


def keep_probability_strict(P: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if not bool((y.sum(-1) > 0).all()):
        raise EmptyLabelSet("ground-truth label set is empty")
    return keep_probability(P, y)


@dataclass
class PositiveSample:
    token_ids: np.ndarray
    keep_prob: np.ndarray
    keep_mask: np.ndarray


def special_mask(token_ids):
    """True at [CLS], [SEP] and [PAD] positions, which are never replaced."""
    if isinstance(token_ids, torch.Tensor):
        return (token_ids == CLS) | (token_ids == SEP) | (token_ids == PAD)
    return np.isin(token_ids, (CLS, SEP, PAD))


def keep_mask(token_ids: torch.Tensor, keep_prob: torch.Tensor, gamma: float) -> torch.Tensor:
    return (keep_prob > gamma) | special_mask(token_ids)


def straight_through_scale(token_ids: torch.Tensor, keep_prob: torch.Tensor, gamma: float,
                           frozen: tuple[torch.Tensor, torch.Tensor] | None = None):
    """Per-token embedding multiplier for the positive sample.

    The forward value is the hard 0/1 keep mask; the gradient flows into
    ``keep_prob``. With ``frozen=(mask, reference)`` the mask and the detached
    reference probabilities are supplied by the caller, which makes the
    multiplier a smooth function of the parameters around the reference point
    (used by finite-difference checks).
    """
    special = special_mask(token_ids)
    if frozen is None:
        hard = keep_mask(token_ids, keep_prob, gamma)
        ref = keep_prob.detach()
    else:
        hard, ref = frozen
    soft = keep_prob - ref
    scale = hard.to(keep_prob.dtype) + soft
    scale = torch.where(special, torch.ones_like(scale), scale)
    return scale, hard


def build_positive(token_ids, keep_prob, gamma: float) -> PositiveSample:
    """Replace tokens whose keep probability is at most ``gamma`` by [ZERO]."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    ids = np.asarray(token_ids)
    prob = np.asarray(keep_prob.detach() if isinstance(keep_prob, torch.Tensor) else keep_prob, dtype=float)
    if ids.shape != prob.shape:
        raise ShapeMismatch(f"token ids {ids.shape} vs keep probabilities {prob.shape}")
    mask = (prob > gamma) | special_mask(ids)
    return PositiveSample(np.where(mask, ids, ZERO), prob, mask)


def project(W_1, W_2, p):
    if W_1.shape[-1] != p.shape[-1] or W_2.shape[-1] != W_1.shape[0]:
        raise ShapeMismatch(f"W_1 {tuple(W_1.shape)}, W_2 {tuple(W_2.shape)}, p {tuple(p.shape)}")
    return torch.relu(p @ W_1.T) @ W_2.T


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = u.norm(), v.norm()
    if nu == 0 or nv == 0:
        raise ZeroNormVector("cosine similarity of a zero vector")
    return (u @ v) / (nu * nv)


def nt_xent(c: torch.Tensor, c_hat: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Mean NT-Xent loss over the 2N anchors of paired views.

    ``c`` and ``c_hat`` are (N, d); row i of each forms a positive pair and
    every other row of the 2N stack is a negative.
    """
    if not tau > 0:
        raise InvalidTemperature(f"tau must be > 0, got {tau}")
    if c.shape != c_hat.shape or c.dim() != 2 or c.shape[0] < 1:
        raise ShapeMismatch(f"paired views must be (N, d) with N >= 1, got {tuple(c.shape)} and {tuple(c_hat.shape)}")
    z = torch.cat([c, c_hat], dim=0)
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ZeroNormVector("NT-Xent input contains a zero vector")
    z = z / norms
    n = c.shape[0]
    logits = (z @ z.T) / tau
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    positive = logits[torch.arange(2 * n, device=z.device), partner]
    # logsumexp subtracts the row max before exponentiating
    return (torch.logsumexp(logits, dim=1) - positive).mean()
