"""Flat linear head, path-guided hierarchy head, max pooling, parameter counts."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import HierarchyMismatch, ShapeMismatch
from .taxonomy import LabelHierarchy

CHAIN_COMBINED = "combined"
CHAIN_POOLED = "pooled"


class LinearHead(nn.Module):
    """sigmoid(W_L p + b_L) over all labels."""

    def __init__(self, d_h: int, num_labels: int):
        super().__init__()
        self.proj = nn.Linear(d_h, num_labels)

    def logits(self, p: torch.Tensor) -> torch.Tensor:
        if p.shape[-1] != self.proj.in_features:
            raise ShapeMismatch(f"expected feature size {self.proj.in_features}, got {p.shape[-1]}")
        return self.proj(p)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(p))


class PathHierarchyHead(nn.Module):
    """Per-level classifiers chained from one level to the next.

    Level h combines a term read directly from the pooled text state with a
    term computed from level h-1 through a hidden layer of width ``k``:

        A_h^P     = W_h^P p + b_h^P
        hidden    = ReLU(W_k^{h-1} A_{h-1} + b_k^{h-1})
        A_h^{h-1} = W_h^k hidden + b_h^k
        A_h       = A_h^P + A_h^{h-1}

    Level 1 has no chain term. The per-level outputs are concatenated in
    global label order and squashed by a sigmoid.

    ``relu_final`` wraps A_h^P and A_h^{h-1} in a ReLU as well; every
    probability is then at least 0.5. ``chain_input="pooled"`` feeds
    A_{h-1}^P into the chain instead of A_{h-1}. ``use_chain=False`` drops the
    hidden layers so that each level reads only the pooled state.
    """

    def __init__(self, d_h: int, level_sizes: list[int], k: int = 128, relu_final: bool = False,
                 chain_input: str = CHAIN_COMBINED, use_chain: bool = True):
        super().__init__()
        if k < 1:
            raise ValueError("k must be >= 1")
        if chain_input not in (CHAIN_COMBINED, CHAIN_POOLED):
            raise ValueError(f"chain_input must be {CHAIN_COMBINED!r} or {CHAIN_POOLED!r}")
        self.d_h = d_h
        self.level_sizes = list(level_sizes)
        self.k = k
        self.relu_final = relu_final
        self.chain_input = chain_input
        self.use_chain = use_chain
        self.pooled = nn.ModuleList(nn.Linear(d_h, c) for c in self.level_sizes)
        if use_chain:
            self.to_hidden = nn.ModuleList(nn.Linear(c, k) for c in self.level_sizes[:-1])
            self.from_hidden = nn.ModuleList(nn.Linear(k, c) for c in self.level_sizes[1:])
        else:
            self.to_hidden = nn.ModuleList()
            self.from_hidden = nn.ModuleList()

    @classmethod
    def for_hierarchy(cls, d_h: int, h: LabelHierarchy, **kwargs) -> "PathHierarchyHead":
        return cls(d_h, h.level_sizes, **kwargs)

    def check_hierarchy(self, h: LabelHierarchy) -> None:
        if h.level_sizes != self.level_sizes:
            raise HierarchyMismatch(f"head levels {self.level_sizes} != hierarchy levels {h.level_sizes}")
        # Concatenation assumes contiguous level blocks in global order.
        start = 0
        for block in h.levels:
            if list(block) != list(range(start, start + len(block))):
                raise HierarchyMismatch("hierarchy levels are not contiguous index blocks")
            start += len(block)

    def logits(self, p: torch.Tensor) -> torch.Tensor:
        if p.shape[-1] != self.d_h:
            raise ShapeMismatch(f"expected feature size {self.d_h}, got {p.shape[-1]}")
        act = torch.relu if self.relu_final else (lambda t: t)
        outputs = []
        prev = prev_pooled = None
        for h, pooled in enumerate(self.pooled):
            a_pooled = act(pooled(p))
            a = a_pooled
            if self.use_chain and h > 0:
                src = prev if self.chain_input == CHAIN_COMBINED else prev_pooled
                hidden = torch.relu(self.to_hidden[h - 1](src))
                a = a_pooled + act(self.from_hidden[h - 1](hidden))
            outputs.append(a)
            prev, prev_pooled = a, a_pooled
        if not outputs:
            return p.new_zeros(p.shape[:-1] + (0,))
        return torch.cat(outputs, dim=-1)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(p))


def linear_head(head: LinearHead, p: torch.Tensor) -> torch.Tensor:
    return head(p)


def path_hierarchy_head(head: PathHierarchyHead, h: LabelHierarchy, p: torch.Tensor) -> torch.Tensor:
    head.check_hierarchy(h)
    return head(p)


def pooled_inference(p_linear, p_hier):
    """Elementwise maximum of the two heads' probabilities."""
    if p_linear.shape != p_hier.shape:
        raise ShapeMismatch(f"{tuple(p_linear.shape)} vs {tuple(p_hier.shape)}")
    if isinstance(p_linear, torch.Tensor):
        return torch.maximum(p_linear, p_hier)
    return np.maximum(p_linear, p_hier)


def count_parameters(module: nn.Module) -> dict[str, int]:
    """Scalar parameter counts per top-level child plus ``total``.

    Parameters registered directly on ``module`` are grouped under ``_self``.
    """
    counts: dict[str, int] = {}
    for name, param in module.named_parameters():
        group = name.split(".", 1)[0] if "." in name else "_self"
        counts[group] = counts.get(group, 0) + param.numel()
    counts["total"] = sum(counts.values())
    return counts
