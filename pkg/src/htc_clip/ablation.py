"""Ablation variants: loss terms, classifier heads and pooling strategies."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .corpus import Sample
from .evaluation import evaluate
from .model import HTCCLIP
from .taxonomy import LabelHierarchy
from .training import train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    table: str
    name: str
    overrides: tuple[tuple[str, object], ...] = ()

    def config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, **dict(self.overrides))


FULL = ()
NO_HAT_H = (("use_hat_hier", False),)
NO_HAT_L = (("use_hat_linear", False),)
NO_HAT_BOTH = (("use_hat_hier", False), ("use_hat_linear", False))
NO_LC = (("use_linear_head", False),)
NO_HC = (("use_hier_head", False),)

VARIANTS: tuple[Variant, ...] = (
    Variant("loss_terms", "HTC-CLIP", FULL),
    Variant("loss_terms", "-r.m. hat_L_C_H", NO_HAT_H),
    Variant("loss_terms", "-r.m. hat_L_C_L", NO_HAT_L),
    Variant("loss_terms", "-r.m. hat_L_C_H & hat_L_C_L", NO_HAT_BOTH),
    Variant("loss_terms", "-r.m. l.c. and hat_L_C_H", NO_LC + NO_HAT_H),
    Variant("classifiers", "HTC-CLIP", FULL),
    Variant("classifiers", "-r.m. h.c.", NO_HC),
    Variant("classifiers", "-r.m. l.c.", NO_LC),
    Variant("classifiers", "-r.m. hidden layers from h.c.", (("use_chain", False),)),
    Variant("pooling", "Only h.c. model", NO_LC),
    Variant("pooling", "Only l.c. model", NO_HC),
    Variant("pooling", "Both l.c. & h.c. with avg pool", (("train_pool", "avg"),)),
    Variant("pooling", "Both l.c. & h.c. with max pool", (("train_pool", "max"),)),
    Variant("pooling", "Both l.c. & h.c. with max pool during inference (HTC-CLIP)", FULL),
)


def fit_and_score(h: LabelHierarchy, cfg: TrainConfig, train_data: Sequence[Sample],
                  eval_data: Sequence[Sample], val_data: Sequence[Sample] | None = None,
                  modes: Sequence[str | None] = (None,)) -> dict:
    """Train one model and evaluate it on ``eval_data`` under each inference mode."""
    model = HTCCLIP.build(cfg, h)
    result = train(model, train_data, val_data if val_data is not None else eval_data, cfg)
    scores = {}
    for mode in modes:
        rep = evaluate(model, eval_data, cfg.decision_threshold, mode)
        scores[mode or "default"] = (rep.micro_f1, rep.macro_f1)
    return {"best_epoch": result.best_epoch, "scores": scores}


def run_ablation(h: LabelHierarchy, base: TrainConfig, train_data: Sequence[Sample],
                 val_data: Sequence[Sample], seeds: Sequence[int],
                 variants: Sequence[Variant] = VARIANTS) -> list[dict]:
    """Train every distinct variant once per seed and score it on ``val_data``.

    Rows that share a configuration (the full model appears in all three
    tables, and the single-head models in two) reuse the same runs.
    """
    cache: dict[tuple, list[tuple[float, float]]] = {}
    rows = []
    for v in variants:
        key = tuple(sorted(v.overrides))
        if key not in cache:
            runs = []
            for seed in seeds:
                cfg = replace(v.config(base), seed=seed)
                logger.info("ablation %s seed %d", v.name, seed)
                runs.append(fit_and_score(h, cfg, train_data, val_data)["scores"]["default"])
            cache[key] = runs
        runs = np.asarray(cache[key])
        rows.append({
            "table": v.table,
            "variant": v.name,
            "micro_f1": float(runs[:, 0].mean()),
            "macro_f1": float(runs[:, 1].mean()),
            "macro_f1_std": float(runs[:, 1].std()),
            "seeds": list(seeds),
        })
    return rows


def format_rows(rows: list[dict]) -> str:
    """Tab-separated table, one line per variant."""
    lines = ["table\tvariant\tmicro_f1\tmacro_f1\tmacro_f1_std\tn_seeds"]
    for r in rows:
        lines.append(f"{r['table']}\t{r['variant']}\t{r['micro_f1']:.6f}\t{r['macro_f1']:.6f}"
                     f"\t{r['macro_f1_std']:.6f}\t{len(r['seeds'])}")
    return "\n".join(lines) + "\n"


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=1, sort_keys=True)
