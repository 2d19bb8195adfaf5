import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from htc_clip.config import TrainConfig
from htc_clip.corpus import CLS, SEP, ZERO, build_vocab, gen_synthetic, make_sample
from htc_clip.encoder import EncoderConfig
from htc_clip.errors import EmptyDataset, HierarchyMismatch, InvalidEpsilon, NonFiniteLoss
from htc_clip.model import HTCCLIP
from htc_clip.taxonomy import parse_taxonomy
from htc_clip.training import (
    BCE_EPS, COMPONENTS, bce_multilabel, compute_losses, grad_check, gradcheck_setup, model_grad_check,
    total_loss, train,
)

D = torch.float64


def oracle_bce(probs, targets):
    eps = BCE_EPS
    total = 0.0
    for prow, yrow in zip(probs, targets):
        for p, y in zip(prow, yrow):
            p = min(max(p, eps), 1 - eps)
            total += -y * math.log(p) - (1 - y) * math.log(1 - p)
    return total / len(probs)


def test_bce_perfect_prediction():
    y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]], dtype=D)
    assert float(bce_multilabel(y, y)) <= 3 * BCE_EPS * 2


def test_bce_half_probabilities():
    y = torch.tensor([[1.0, 0.0, 1.0, 0.0]] * 5, dtype=D)
    assert abs(float(bce_multilabel(torch.full_like(y, 0.5), y)) - 4 * math.log(2)) < 1e-12


def test_bce_matches_oracle(rng):
    for _ in range(100):
        p = rng.uniform(0, 1, size=(2, 3))
        y = rng.integers(0, 2, size=(2, 3)).astype(float)
        got = float(bce_multilabel(torch.as_tensor(p), torch.as_tensor(y)))
        assert abs(got - oracle_bce(p.tolist(), y.tolist())) < 1e-12


def test_total_loss_examples():
    assert total_loss([1, 2, 3, 4, 10], 0.05) == pytest.approx(10.5, abs=1e-12)
    assert total_loss([1, 2, 3, 4, 10], 0.0) == 10
    assert total_loss([0, 0, 0, 0, 0], 0.3) == 0
    parts = dict(zip(COMPONENTS, (torch.tensor(v, dtype=D) for v in (1, 2, 3, 4, 10))))
    assert float(total_loss(parts, 0.05)) == pytest.approx(10.5, abs=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_total_loss_rejects_non_finite(bad):
    with pytest.raises(NonFiniteLoss):
        total_loss([1, bad, 0, 0, 0], 0.1)
    with pytest.raises(NonFiniteLoss):
        total_loss([torch.tensor(1.0), torch.tensor(bad), torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0)], 0.1)


def test_grad_check_quadratic():
    # central differences are exact on a quadratic; a wide step leaves only roundoff
    theta = torch.linspace(0.5, 2.0, 30, dtype=D).requires_grad_()
    res = grad_check(lambda: (theta ** 2).sum(), {"theta": theta}, eps=1e-3, n_samples=30)
    assert res.max_rel_error < 1e-10 and res.n_checked == 30


def test_grad_check_detects_wrong_gradient():
    theta = torch.randn(10, dtype=D, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x

    res = grad_check(lambda: Wrong.apply(theta), {"theta": theta}, n_samples=10)
    assert not res.passed()


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_grad_check_rejects_eps(eps):
    theta = torch.zeros(2, dtype=D, requires_grad=True)
    with pytest.raises(InvalidEpsilon):
        grad_check(lambda: theta.sum(), {"theta": theta}, eps=eps)


def test_full_model_grad_check_covers_every_group():
    model, ids, targets = gradcheck_setup(seed=0)
    assert model.hierarchy.level_sizes == [3, 4]
    res = model_grad_check(model, ids, targets, eps=1e-5, n_samples=200, seed=0)
    assert res.n_checked >= 200
    assert set(res.per_group) == {"embeddings", "attention", "feedforward_norm", "label_encoder",
                                  "sampler", "projection", "linear_head", "hier_head"}
    assert res.max_rel_error < 1e-4
    again = model_grad_check(*gradcheck_setup(seed=0), eps=1e-5, n_samples=200, seed=0)
    assert again.max_rel_error == res.max_rel_error


def test_sampler_receives_gradient_through_positive_view():
    model, ids, targets = gradcheck_setup(seed=1)
    model.train()
    compute_losses(model, ids, targets, torch.Generator().manual_seed(0)).total.backward()
    assert float(model.sampler.W_Q.grad.abs().sum()) > 0
    assert float(model.label_encoder.label_emb.weight.grad.abs().sum()) > 0


# ---- training loop

TINY_ENC = EncoderConfig(d_h=16, n_layers=1, n_heads=2, max_len=12, vocab_size=100, feedforward_dim=32)


@pytest.fixture(scope="module")
def tiny():
    text, records = gen_synthetic(2, 2, 120, seed=3, noise_tokens=3, noise_pool=10)
    h = parse_taxonomy(text.splitlines())
    vocab = build_vocab([r["text"] for r in records])
    samples = [make_sample(h, vocab, r["text"], r["labels"], 12) for r in records]
    cfg = TrainConfig(encoder=replace(TINY_ENC, vocab_size=len(vocab)), batch_size=16, k=4,
                      max_epochs=4, patience=4, learning_rate=3e-3, seed=1)
    return h, samples[:90], samples[90:], cfg


def test_constant_zero_learning_rate_stops_after_patience_plus_one(tiny):
    h, tr, va, cfg = tiny
    cfg = replace(cfg, learning_rate=0.0, patience=2, max_epochs=20)
    result = train(HTCCLIP.build(cfg, h), tr, va, cfg)
    assert result.epochs_run == 3
    assert result.best_epoch == 1 and result.stopped_early
    assert [r["best_flag"] for r in result.history] == [True, False, False]


def test_history_fields_and_decomposition(tiny):
    h, tr, va, cfg = tiny
    reports = []
    result = train(HTCCLIP.build(cfg, h), tr, va, cfg, callback=lambda info: reports.append(info))
    assert set(result.history[0]) == {"epoch", "train_loss", *COMPONENTS, "val_micro_f1", "val_macro_f1",
                                      "best_flag"}
    assert len(reports) == result.steps == cfg.max_epochs * math.ceil(len(tr) / cfg.batch_size)
    for info in reports:
        assert info.report.decomposition_error() <= 1e-9
        assert all(v >= 0 for v in info.report.components().values())
        assert info.positive_ids.shape == info.batch.token_ids.shape
        special = np.isin(info.batch.token_ids, (CLS, SEP))
        assert (info.positive_ids[special] == info.batch.token_ids[special]).all()
        changed = info.positive_ids != info.batch.token_ids
        assert (info.positive_ids[changed] == ZERO).all()
    assert result.max_decomposition_error <= 1e-9


def test_training_is_bitwise_reproducible(tiny):
    h, tr, va, cfg = tiny
    a = train(HTCCLIP.build(cfg, h), tr, va, cfg)
    b = train(HTCCLIP.build(cfg, h), tr, va, cfg)
    assert a.history == b.history
    for k in a.best_state:
        assert torch.equal(a.best_state[k], b.best_state[k])


def test_best_state_is_restored(tiny):
    h, tr, va, cfg = tiny
    model = HTCCLIP.build(cfg, h)
    result = train(model, tr, va, cfg)
    for k, v in model.state_dict().items():
        assert torch.equal(v, result.best_state[k])


def test_contrastive_term_skipped_for_single_sample_batches(tiny):
    h, tr, _, cfg = tiny
    model = HTCCLIP.build(cfg, h).train()
    one = compute_losses(model, torch.as_tensor(tr[0].token_ids[None]), torch.as_tensor(tr[0].target[None]),
                         torch.Generator().manual_seed(0))
    assert float(one.parts["L_con"]) == 0.0
    ids = torch.as_tensor(np.stack([s.token_ids for s in tr[:4]]))
    ys = torch.as_tensor(np.stack([s.target for s in tr[:4]]))
    assert float(compute_losses(model, ids, ys, torch.Generator().manual_seed(0)).parts["L_con"].detach()) > 0


def test_disabled_terms_are_zero(tiny):
    h, tr, _, cfg = tiny
    cfg = replace(cfg, use_hat_hier=False, use_hat_linear=False, lam=0.0)
    model = HTCCLIP.build(cfg, h).train()
    ids = torch.as_tensor(np.stack([s.token_ids for s in tr[:4]]))
    ys = torch.as_tensor(np.stack([s.target for s in tr[:4]]))
    parts = compute_losses(model, ids, ys, torch.Generator().manual_seed(0)).parts
    assert float(parts["hat_L_C_L"]) == float(parts["hat_L_C_H"]) == float(parts["L_con"]) == 0.0


def test_non_finite_loss_aborts(tiny):
    h, tr, va, cfg = tiny
    model = HTCCLIP.build(cfg, h)
    with torch.no_grad():
        model.linear_head.proj.bias.fill_(math.nan)
    with pytest.raises(NonFiniteLoss):
        train(model, tr, va, cfg)


def test_train_input_errors(tiny, toy):
    h, tr, va, cfg = tiny
    with pytest.raises(EmptyDataset):
        train(HTCCLIP.build(cfg, h), [], va, cfg)
    with pytest.raises(HierarchyMismatch):
        train(HTCCLIP.build(cfg, toy), tr, va, cfg)
