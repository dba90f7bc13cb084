from __future__ import annotations

import json
import math

import pytest
import torch

from medseg.errors import NonFiniteLoss, ShapeError
from medseg.model import MedSegModel
from medseg.synth import SynthConfig, generate_dataset
from medseg.training import (
    LossWeights,
    TrainConfig,
    grad_check,
    mask_loss,
    text_loss,
    total_loss,
    train,
)

from conftest import tiny_gcu_config, tiny_pg_config


def make_tiny(vocab, seed=0):
    torch.manual_seed(seed)
    return MedSegModel(tiny_gcu_config(vocab.size), tiny_pg_config(), vocab)


@pytest.fixture(scope="module")
def tiny_samples():
    return generate_dataset(SynthConfig(num_samples=4, seed=3, image_size=16))


def test_uniform_logits_give_log_vocab():
    v = 54
    logits = torch.zeros(6, v)
    targets = torch.randint(0, v, (6,))
    mask = torch.ones(6, dtype=torch.bool)
    assert float(text_loss(logits, targets, mask)) == pytest.approx(math.log(v), abs=1e-6)


def test_confident_correct_logits_near_zero():
    v = 20
    targets = torch.arange(5) % v
    logits = torch.zeros(5, v)
    logits[torch.arange(5), targets] = 20.0
    mask = torch.ones(5, dtype=torch.bool)
    assert float(text_loss(logits, targets, mask)) < 1e-6


def test_text_loss_matches_hand_computed_case():
    # independent scalar softmax cross-entropy, double precision
    logits = torch.tensor([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0]],
                          dtype=torch.float64)
    targets = torch.tensor([1, 2, 0])
    mask = torch.ones(3, dtype=torch.bool)

    def hand_ce(row, t):
        exps = [math.exp(x) for x in row]
        return -math.log(exps[t] / sum(exps))

    want = sum(hand_ce(list(map(float, logits[i])), int(targets[i]))
               for i in range(3)) / 3
    assert float(text_loss(logits, targets, mask)) == pytest.approx(want, abs=1e-9)


def test_text_loss_zero_supervision_is_zero_with_zero_grad():
    logits = torch.zeros(4, 10, requires_grad=True)
    loss = text_loss(logits, torch.zeros(4, dtype=torch.long),
                     torch.zeros(4, dtype=torch.bool))
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert torch.count_nonzero(logits.grad) == 0


def test_text_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        text_loss(torch.zeros(4, 10), torch.zeros(3, dtype=torch.long),
                  torch.ones(4, dtype=torch.bool))


def test_mask_loss_exact_match_near_zero():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    logits = torch.where(gt > 0, torch.tensor(20.0), torch.tensor(-20.0))
    loss = mask_loss([logits], [gt], LossWeights())
    assert float(loss) < 1e-6


def test_mask_loss_half_probability_dice_case():
    # p = 0.5 everywhere, all-ones 2x2 target, eps = 1:
    # dice term = 1 - (2*2 + 1)/(2 + 4 + 1) = 2/7, bce term = ln 2
    gt = torch.ones(2, 2, dtype=torch.float64)
    logits = torch.zeros(2, 2, dtype=torch.float64)
    w = LossWeights(w_bce=0.0, w_dice=1.0, dice_eps=1.0)
    assert float(mask_loss([logits], [gt], w)) == pytest.approx(2.0 / 7.0, abs=1e-12)
    w = LossWeights(w_bce=1.0, w_dice=0.0)
    assert float(mask_loss([logits], [gt], w)) == pytest.approx(math.log(2), abs=1e-12)


def test_mask_loss_empty_lists_zero():
    assert float(mask_loss([], [], LossWeights())) == 0.0


def test_mask_loss_length_mismatch():
    with pytest.raises(ShapeError):
        mask_loss([torch.zeros(2, 2)], [], LossWeights())


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_t=-0.1)


def test_total_loss_linear_in_lambdas(vocab, tiny_samples):
    model = make_tiny(vocab).double()
    _, parts = total_loss(model, tiny_samples[:2], LossWeights())
    lt, lm = parts["loss_text"], parts["loss_mask"]
    for lam_t, lam_m in [(1.0, 1.0), (0.0, 1.0), (2.5, 0.3), (0.0, 0.0)]:
        w = LossWeights(lambda_t=lam_t, lambda_m=lam_m)
        got, _ = total_loss(model, tiny_samples[:2], w)
        assert float(got.detach()) == pytest.approx(lam_t * lt + lam_m * lm, abs=1e-12)


def test_lambda_m_zero_reduces_to_text_loss(vocab, tiny_samples):
    model = make_tiny(vocab).double()
    got, parts = total_loss(model, tiny_samples[:2],
                            LossWeights(lambda_t=1.0, lambda_m=0.0))
    assert float(got.detach()) == pytest.approx(parts["loss_text"], abs=1e-12)


def test_doubling_lambda_m_doubles_prompt_path_gradient(vocab, tiny_samples):
    model = make_tiny(vocab).double()
    sample = [s for s in tiny_samples if s.masks][:1]
    grads = {}
    for lam_m in (1.0, 2.0):
        model.zero_grad()
        loss, _ = total_loss(model, sample, LossWeights(lambda_t=0.0, lambda_m=lam_m))
        loss.backward()
        grads[lam_m] = model.prompt_proj.fc1.weight.grad.clone()
    assert torch.allclose(grads[2.0], 2.0 * grads[1.0], atol=1e-12)


def test_grad_check_passes_on_tiny_config(vocab, tiny_samples):
    model = make_tiny(vocab)
    err = grad_check(model, tiny_samples[:1], epsilon=1e-5, n_coords=60, seed=1)
    assert err <= 1e-3


def test_grad_check_detects_broken_path(vocab, tiny_samples):
    model = make_tiny(vocab)

    class _DoubleGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x

        @staticmethod
        def backward(ctx, g):
            return 2.0 * g

    original = type(model.prompt_proj).forward

    def tainted(self, state):
        return _DoubleGrad.apply(original(self, state))

    type(model.prompt_proj).forward = tainted
    try:
        err = grad_check(model, tiny_samples[:1], epsilon=1e-5, n_coords=120, seed=1)
    finally:
        type(model.prompt_proj).forward = original
    assert err > 1e-1


def test_grad_check_rejects_zero_epsilon(vocab, tiny_samples):
    with pytest.raises(ValueError):
        grad_check(make_tiny(vocab), tiny_samples[:1], epsilon=0.0)


def test_train_step_zero_loss_matches_total_loss(vocab, tiny_samples):
    model = make_tiny(vocab, seed=4)
    expect, _ = total_loss(model, tiny_samples, LossWeights())
    cfg = TrainConfig(steps=1, batch_size=len(tiny_samples), seed=0,
                      eval_every=10 ** 9)
    last = train(tiny_samples, model, cfg)
    assert last["loss_total"] == pytest.approx(float(expect.detach()), rel=1e-6)


def test_train_is_deterministic(vocab, tiny_samples):
    losses = []
    for _ in range(2):
        model = make_tiny(vocab, seed=9)
        cfg = TrainConfig(steps=5, batch_size=2, seed=7, eval_every=10 ** 9)
        losses.append(train(tiny_samples, model, cfg)["loss_total"])
    assert losses[0] == losses[1]


def test_train_raises_on_nonfinite(vocab, tiny_samples, tmp_path):
    model = make_tiny(vocab)
    with torch.no_grad():
        model.gcu.lm_head.weight[0, 0] = float("nan")
    cfg = TrainConfig(steps=3, batch_size=2, seed=0,
                      checkpoint_dir=tmp_path, eval_every=10 ** 9)
    with pytest.raises(NonFiniteLoss):
        train(tiny_samples, model, cfg)
    assert (tmp_path / "diagnostic.json").is_file()


def test_train_writes_metrics_log_and_checkpoint(vocab, tiny_samples, tmp_path):
    model = make_tiny(vocab)
    cfg = TrainConfig(steps=4, batch_size=2, seed=0, eval_every=2,
                      checkpoint_dir=tmp_path)
    train(tiny_samples, model, cfg, eval_fn=lambda m: 0.5)
    log = (tmp_path / "metrics.jsonl").read_text().splitlines()
    entries = [json.loads(line) for line in log]
    assert [e["step"] for e in entries] == [1, 2, 3, 4]
    assert all({"loss_total", "loss_text", "loss_mask"} <= set(e) for e in entries)
    assert entries[1]["dsc_train"] == 0.5
    assert (tmp_path / "model.ckpt").is_file()
