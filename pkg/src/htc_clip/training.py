"""Loss assembly, the training loop with early stopping, and gradient checking."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .contrastive import nt_xent
from .corpus import ZERO, Batch, Sample, make_batches
from .encoder import EncoderConfig
from .errors import (
    EmptyDataset,
    HierarchyMismatch,
    InvalidEpsilon,
    NonFiniteGradient,
    NonFiniteLoss,
    ShapeMismatch,
)
from .evaluation import decide, macro_f1, micro_f1, predict_proba
from .model import HTCCLIP
from .taxonomy import LabelHierarchy, closure_mask, parse_taxonomy

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
COMPONENTS = ("L_C_L", "L_C_H", "hat_L_C_L", "hat_L_C_H", "L_con")


def bce_multilabel(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over labels and samples, divided by N."""
    if probs.shape != targets.shape or probs.dim() != 2:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    p = probs.clamp(BCE_EPS, 1 - BCE_EPS)
    y = targets.to(p.dtype)
    per_cell = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    return per_cell.sum() / probs.shape[0]


def total_loss(components, lam: float):
    """L_C_L + L_C_H + hat_L_C_L + hat_L_C_H + lam * L_con.

    ``components`` is a sequence in that order or a mapping keyed by
    ``COMPONENTS``. Tensor terms are summed in double precision so the
    total can be reproduced exactly from the reported parts.
    """
    if isinstance(components, Mapping):
        components = [components[k] for k in COMPONENTS]
    parts = list(components)
    if len(parts) != 5:
        raise ValueError("expected five loss components")
    if isinstance(parts[0], torch.Tensor):
        parts = [t.double() for t in parts]
        values = [float(t.detach()) for t in parts]
    else:
        values = [float(t) for t in parts]
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteLoss(f"non-finite loss component: {dict(zip(COMPONENTS, values))}")
    l_cl, l_ch, hat_l, hat_h, l_con = parts
    return l_cl + l_ch + hat_l + hat_h + lam * l_con


@dataclass
class LossReport:
    L_C_L: float
    L_C_H: float
    hat_L_C_L: float
    hat_L_C_H: float
    L_con: float
    total: float
    lam: float

    def recomputed_total(self) -> float:
        return self.L_C_L + self.L_C_H + self.hat_L_C_L + self.hat_L_C_H + self.lam * self.L_con

    def decomposition_error(self) -> float:
        return abs(self.total - self.recomputed_total())

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COMPONENTS}


@dataclass
class StepLosses:
    parts: dict[str, torch.Tensor]
    total: torch.Tensor
    keep_prob: torch.Tensor
    keep_mask: torch.Tensor

    def report(self, lam: float) -> LossReport:
        return LossReport(**{k: float(v.detach().double()) for k, v in self.parts.items()},
                          total=float(self.total.detach()), lam=lam)


def compute_losses(model: HTCCLIP, token_ids: torch.Tensor, targets: torch.Tensor,
                   generator: torch.Generator | None = None, frozen=None) -> StepLosses:
    """All terms of the training objective for one batch."""
    cfg = model.cfg
    targets = targets.to(next(model.parameters()).dtype)
    out = model.text_encoder(token_ids)
    view, keep_prob, hard = model.positive_view(token_ids, out.e, targets, generator, frozen)
    heads, heads_hat = model.heads(out.p), model.heads(view.p)
    zero = out.p.new_zeros(())
    parts = dict.fromkeys(COMPONENTS, zero)
    if cfg.train_pool != "none":
        # a single pooled output; its terms are reported in the linear slots
        parts["L_C_L"] = bce_multilabel(model.combine(heads), targets)
        if cfg.use_hat_linear or cfg.use_hat_hier:
            parts["hat_L_C_L"] = bce_multilabel(model.combine(heads_hat), targets)
    else:
        if heads.linear is not None:
            parts["L_C_L"] = bce_multilabel(heads.linear, targets)
            if cfg.use_hat_linear:
                parts["hat_L_C_L"] = bce_multilabel(heads_hat.linear, targets)
        if heads.hierarchy is not None:
            parts["L_C_H"] = bce_multilabel(heads.hierarchy, targets)
            if cfg.use_hat_hier:
                parts["hat_L_C_H"] = bce_multilabel(heads_hat.hierarchy, targets)
    if token_ids.shape[0] > 1 and cfg.lam > 0:
        parts["L_con"] = nt_xent(model.projection(out.p), model.projection(view.p), cfg.tau)
    return StepLosses(parts, total_loss(parts, cfg.lam), keep_prob, hard)


@dataclass
class StepInfo:
    epoch: int
    step: int
    batch: Batch
    positive_ids: np.ndarray
    keep_mask: np.ndarray
    report: LossReport


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    best_epoch: int
    best_macro_f1: float
    history: list[dict]
    steps: int
    max_decomposition_error: float = 0.0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def validation_scores(model: HTCCLIP, samples: Sequence[Sample], threshold: float) -> tuple[float, float]:
    probs = predict_proba(model, samples)
    pred = decide(probs, threshold)
    gold = np.stack([s.target for s in samples])
    return micro_f1(pred, gold), macro_f1(pred, gold)


def train(model: HTCCLIP, train_data: Sequence[Sample], val_data: Sequence[Sample],
          cfg: TrainConfig | None = None,
          callback: Callable[[StepInfo], None] | None = None) -> TrainResult:
    """Optimize ``model`` with Adam, keeping the state with the best val Macro-F1.

    Training stops after ``cfg.patience`` consecutive epochs without a strict
    Macro-F1 improvement, or after ``cfg.max_epochs``. The best state is
    loaded back into ``model`` before returning.
    """
    cfg = cfg or model.cfg
    if not train_data or not val_data:
        raise EmptyDataset("training and validation sets must be non-empty")
    width = model.hierarchy.size
    if train_data[0].target.shape[0] != width or val_data[0].target.shape[0] != width:
        raise HierarchyMismatch("dataset targets do not match the model's hierarchy")

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    history: list[dict] = []
    best_macro, best_epoch, best_state = -math.inf, 0, None
    stale, steps, max_dec = 0, 0, 0.0
    stopped_early = False

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            batches = make_batches(train_data, cfg.batch_size, seed=_derived_seed(cfg.seed, epoch), shuffle=True)
            sums = dict.fromkeys((*COMPONENTS, "total"), 0.0)
            for b, batch in enumerate(batches):
                gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, epoch, b, 1))
                ids = torch.as_tensor(batch.token_ids)
                targets = torch.as_tensor(batch.targets)
                try:
                    losses = compute_losses(model, ids, targets, gen)
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(f"epoch {epoch}, batch {b}: {exc}") from None
                report = losses.report(cfg.lam)
                max_dec = max(max_dec, report.decomposition_error())
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                optimizer.step()
                steps += 1
                for k, v in report.components().items():
                    sums[k] += v
                sums["total"] += report.total
                if callback is not None:
                    mask = losses.keep_mask.detach().numpy()
                    pos = np.where(mask, batch.token_ids, ZERO)
                    callback(StepInfo(epoch, b, batch, pos, mask, report))

            val_micro, val_macro = validation_scores(model, val_data, cfg.decision_threshold)
            improved = val_macro > best_macro
            if improved:
                best_macro, best_epoch, stale = val_macro, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
            record = {"epoch": epoch, "train_loss": sums["total"] / len(batches)}
            record.update({k: sums[k] / len(batches) for k in COMPONENTS})
            record.update(val_micro_f1=val_micro, val_macro_f1=val_macro, best_flag=improved)
            history.append(record)
            logger.info("epoch %d loss %.4f val micro %.4f macro %.4f%s", epoch, record["train_loss"],
                        val_micro, val_macro, " *" if improved else "")
            if stale >= cfg.patience:
                stopped_early = True
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_state, best_epoch, best_macro, history, steps, max_dec, stopped_early)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    per_group: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], eps: float = 1e-5,
               n_samples: int = 200, seed: int = 0, groups: Mapping[str, str] | None = None) -> GradCheckResult:
    """Compare autograd gradients with central differences on sampled scalars.

    ``loss_fn`` evaluates the loss from the current values of ``params``.
    Samples are spread evenly over parameter groups (``groups`` maps a
    parameter name to its group; by default every parameter is its own
    group). The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as
    denominator.
    """
    if not eps > 0:
        raise InvalidEpsilon(f"eps must be > 0, got {eps}")
    names = [n for n, p in params.items() if p.numel() > 0]
    tensors = [params[n] for n in names]
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, analytic)]
    if not all(bool(torch.isfinite(g).all()) for g in analytic):
        raise NonFiniteGradient("analytic gradient is not finite")

    group_of = {n: (groups or {}).get(n, n) for n in names}
    by_group: dict[str, list[int]] = {}
    for i, n in enumerate(names):
        by_group.setdefault(group_of[n], []).append(i)
    rng = np.random.default_rng(seed)
    per_group_n = math.ceil(n_samples / len(by_group)) if by_group else 0
    picks: list[tuple[int, int]] = []
    for g in sorted(by_group):
        members = by_group[g]
        sizes = np.array([tensors[i].numel() for i in members])
        flat = rng.choice(sizes.sum(), size=min(per_group_n, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for f in np.sort(flat):
            j = int(np.searchsorted(bounds, f, side="right"))
            offset = int(f - (bounds[j - 1] if j else 0))
            picks.append((members[j], offset))

    worst, max_err = None, 0.0
    per_group: dict[str, float] = {}
    with torch.no_grad():
        for i, offset in picks:
            flat = tensors[i].view(-1)
            orig = flat[offset].item()
            flat[offset] = orig + eps
            f_plus = float(loss_fn())
            flat[offset] = orig - eps
            f_minus = float(loss_fn())
            flat[offset] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[i].view(-1)[offset])
            if not (math.isfinite(numeric) and math.isfinite(a)):
                raise NonFiniteGradient(f"non-finite gradient at {names[i]}[{offset}]")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            g = group_of[names[i]]
            per_group[g] = max(per_group.get(g, 0.0), err)
            if err >= max_err:
                max_err, worst = err, (names[i], offset)
    return GradCheckResult(max_err, len(picks), per_group, worst)


def parameter_group(name: str) -> str:
    if name.startswith("text_encoder.tok") or name.startswith("text_encoder.pos"):
        return "embeddings"
    if name.startswith("text_encoder.layers") and ".attn." in name:
        return "attention"
    if name.startswith("text_encoder"):
        return "feedforward_norm"
    return name.split(".", 1)[0]


GRADCHECK_TAXONOMY = ["Root\tA\tB\tC", "A\tA1\tA2", "B\tB1", "C\tC1"]
# At the training init scale most gradients sit below the finite-difference
# roundoff floor; a wider init keeps them measurable.
GRADCHECK_INIT_STD = 0.5


def gradcheck_setup(seed: int = 0, batch_size: int = 4, max_len: int = 10):
    """Tiny double-precision model and batch: d_h 16, 2 layers, 4 heads, vocab 50, |C| 7."""
    h = parse_taxonomy(GRADCHECK_TAXONOMY)
    enc = EncoderConfig(d_h=16, n_layers=2, n_heads=4, max_len=max_len, vocab_size=50,
                        feedforward_dim=32, dropout_rate=0.1, graph_layers=1, max_distance_bucket=4)
    cfg = TrainConfig(encoder=enc, k=8, lam=0.5, gamma=0.02, seed=seed, batch_size=batch_size)
    model = HTCCLIP.build(cfg, h, seed=seed, init_std=GRADCHECK_INIT_STD).double()
    rng = np.random.default_rng(seed)
    ids = np.zeros((batch_size, max_len), dtype=np.int64)
    targets = np.zeros((batch_size, h.size))
    for i in range(batch_size):
        n_tok = int(rng.integers(3, max_len - 1))
        ids[i, 0] = 1
        ids[i, 1:n_tok + 1] = rng.integers(5, enc.vocab_size, size=n_tok)
        ids[i, n_tok + 1] = 2
        leaf = int(rng.choice([j for j in range(h.size) if not h.children(j)]))
        targets[i] = closure_mask(h, [leaf])
    return model, torch.as_tensor(ids), torch.as_tensor(targets)


def model_grad_check(model: HTCCLIP, token_ids: torch.Tensor, targets: torch.Tensor, eps: float = 1e-5,
                     n_samples: int = 200, seed: int = 0) -> GradCheckResult:
    """Gradient check of the full training objective.

    Dropout masks and Gumbel noise are replayed from fixed seeds on every
    evaluation, and the hard keep mask is frozen at its value for the
    unperturbed parameters.
    """
    if not eps > 0:
        raise InvalidEpsilon(f"eps must be > 0, got {eps}")
    model.train()

    def run(frozen=None):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed + 1)
        return compute_losses(model, token_ids, targets, gen, frozen)

    with torch.random.fork_rng(devices=[]):
        base = run()
        frozen = (base.keep_mask.detach(), base.keep_prob.detach())
        params = dict(model.named_parameters())
        groups = {n: parameter_group(n) for n in params}
        return grad_check(lambda: run(frozen).total, params, eps, n_samples, seed, groups)
