"""The full model: text encoder, label encoder, sampler, projection and heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .classifiers import LinearHead, PathHierarchyHead
from .config import TrainConfig
from .contrastive import ProjectionHead, TokenLabelSampler, gumbel_softmax_rows, keep_probability, straight_through_scale
from .encoder import INIT_STD, LabelGraphEncoder, TextEncoder, init_params
from .taxonomy import LabelHierarchy


@dataclass
class HeadOutputs:
    linear: torch.Tensor | None
    hierarchy: torch.Tensor | None


class HTCCLIP(nn.Module):
    def __init__(self, cfg: TrainConfig, hierarchy: LabelHierarchy):
        super().__init__()
        self.cfg = cfg
        self.hierarchy = hierarchy
        enc = cfg.encoder
        self.text_encoder = TextEncoder(enc)
        self.label_encoder = LabelGraphEncoder(enc, hierarchy.size)
        self.sampler = TokenLabelSampler(enc.d_h)
        self.projection = ProjectionHead(enc.d_h)
        self.linear_head = LinearHead(enc.d_h, hierarchy.size) if cfg.use_linear_head else None
        self.hier_head = None
        if cfg.use_hier_head:
            self.hier_head = PathHierarchyHead.for_hierarchy(
                enc.d_h, hierarchy, k=cfg.k, relu_final=cfg.relu_final,
                chain_input=cfg.chain_input, use_chain=cfg.use_chain,
            )
            self.hier_head.check_hierarchy(hierarchy)

    @classmethod
    def build(cls, cfg: TrainConfig, hierarchy: LabelHierarchy, seed: int | None = None,
              init_std: float = INIT_STD) -> "HTCCLIP":
        model = cls(cfg, hierarchy)
        init_params(model, cfg.seed if seed is None else seed, init_std)
        return model

    def heads(self, p: torch.Tensor) -> HeadOutputs:
        return HeadOutputs(
            linear=self.linear_head(p) if self.linear_head is not None else None,
            hierarchy=self.hier_head(p) if self.hier_head is not None else None,
        )

    def combine(self, out: HeadOutputs, mode: str | None = None) -> torch.Tensor:
        """Final per-label probabilities.

        ``mode`` defaults to the configured behaviour: the single head when
        only one exists, the training pool when one was used, else max.
        """
        if out.linear is None:
            return out.hierarchy
        if out.hierarchy is None:
            return out.linear
        mode = mode or ("avg" if self.cfg.train_pool == "avg" else "max")
        if mode == "linear":
            return out.linear
        if mode == "hierarchy":
            return out.hierarchy
        if mode == "avg":
            return (out.linear + out.hierarchy) / 2
        return torch.maximum(out.linear, out.hierarchy)

    def keep_scores(self, token_ids: torch.Tensor, e: torch.Tensor, targets: torch.Tensor,
                    generator: torch.Generator | None, noise_enabled: bool = True):
        """Per-token label probabilities and ground-truth keep probabilities."""
        L = self.label_encoder(self.hierarchy)
        scores = self.sampler(e, L)
        P = gumbel_softmax_rows(scores, self.cfg.gumbel_temperature, generator, noise_enabled)
        return P, keep_probability(P, targets)

    def positive_view(self, token_ids, e, targets, generator=None, frozen=None):
        """Encode the positive sample; returns (encoder output, keep prob, hard mask)."""
        _, keep_prob = self.keep_scores(token_ids, e, targets, generator)
        scale, hard = straight_through_scale(token_ids, keep_prob, self.cfg.gamma, frozen)
        return self.text_encoder(token_ids, token_scale=scale), keep_prob, hard

    @torch.no_grad()
    def predict_proba(self, token_ids: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            out = self.text_encoder(token_ids)
            return self.combine(self.heads(out.p), mode)
        finally:
            self.train(was)
