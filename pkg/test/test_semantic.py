import math

import numpy as np
import pytest
import torch

import utils
import mindcine.semantic as semantic
from mindcine.defs import NumericError, ShapeError, ValidationError
from mindcine.semantic import (
    JointLossWeights,
    SemanticLossWeights,
    SemanticPredictor,
    SoftClipParams,
    alignment_loss,
    build_semantic,
    joint_loss,
    load_semantic_checkpoint,
    predict_semantic,
    projection_loss,
    save_semantic_checkpoint,
    semantic_total_loss,
    soft_cross_entropy,
    softclip_loss,
    train_semantic,
)


def _entropy_of_softmax_10():
    p = np.exp([1.0, 0.0]) / np.sum(np.exp([1.0, 0.0]))
    return float(-np.sum(p * np.log(p)))


def test_softclip_orthonormal_pair():
    e = torch.eye(2, dtype=torch.float64)
    total = softclip_loss(e, e, tau=1.0, reduction="sum")
    assert float(total) == pytest.approx(1.1644, abs=1e-4)
    assert float(total) == pytest.approx(2 * _entropy_of_softmax_10(), abs=1e-12)
    assert float(softclip_loss(e, e, tau=1.0)) == pytest.approx(_entropy_of_softmax_10(), abs=1e-12)


def test_softclip_single_sample_is_zero():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(1, 8, generator=g, dtype=torch.float64)
    b = torch.randn(1, 8, generator=g, dtype=torch.float64)
    assert float(softclip_loss(a, b, tau=0.07)) == 0.0


def test_softclip_gibbs_bound():
    g = torch.Generator().manual_seed(1)
    e = torch.randn(4, 8, generator=g, dtype=torch.float64)
    own = float(softclip_loss(e, e, tau=0.5))
    for _ in range(1000):
        other = torch.randn(4, 8, generator=g, dtype=torch.float64)
        assert own <= float(softclip_loss(other, e, tau=0.5)) + 1e-12


def test_softclip_scale_invariant():
    g = torch.Generator().manual_seed(2)
    a = torch.randn(3, 5, generator=g, dtype=torch.float64)
    b = torch.randn(3, 5, generator=g, dtype=torch.float64)
    assert float(softclip_loss(a, b, tau=0.2)) == pytest.approx(float(softclip_loss(4 * a, 0.5 * b, tau=0.2)), abs=1e-12)


def test_softclip_input_errors():
    with pytest.raises(ValidationError):
        softclip_loss(torch.zeros(0, 4), torch.zeros(0, 4), tau=1.0)
    with pytest.raises(ShapeError):
        softclip_loss(torch.ones(2, 4), torch.ones(2, 5), tau=1.0)
    with pytest.raises(ValidationError):
        softclip_loss(torch.ones(2, 4), torch.ones(2, 4))


def test_temperature_is_learnable():
    params = SoftClipParams(tau_init=0.07)
    assert float(params.tau()) == pytest.approx(0.07)
    e = torch.randn(4, 6, requires_grad=True)
    t = torch.randn(4, 6)
    softclip_loss(e, t, params).backward()
    assert params.log_tau.grad is not None
    assert e.grad is not None

    fixed = SoftClipParams(tau_init=0.07, learn_tau=False, shared=False)
    assert not fixed.log_tau.requires_grad
    assert fixed.log_tau.shape == (3,)


def test_joint_loss_weights():
    g = torch.Generator().manual_seed(3)
    e, v, t, d = (torch.randn(4, 6, generator=g, dtype=torch.float64) for _ in range(4))
    text_only = joint_loss(e, v, t, d, JointLossWeights(0.0, 1.0, 0.0), tau=0.3)
    assert float(text_only) == pytest.approx(float(softclip_loss(e, t, tau=0.3)), abs=1e-12)

    mix = joint_loss(e, v, t, d, JointLossWeights(0.2, 0.3, 0.5), tau=0.3)
    expect = sum(a * float(softclip_loss(e, x, tau=0.3)) for a, x in ((0.2, v), (0.3, t), (0.5, d)))
    assert float(mix) == pytest.approx(expect, abs=1e-12)

    with pytest.raises(ValidationError):
        JointLossWeights(-0.1, 0.5, 0.5)
    with pytest.raises(ShapeError):
        joint_loss(e, v[:3], t, d, tau=0.3)


def test_total_loss_combination():
    parts = {"projection": 1.0, "joint": 2.0, "alignment": 3.0}
    assert semantic_total_loss(parts) == pytest.approx(2.52)
    assert semantic_total_loss(parts, SemanticLossWeights(0.0, 0.0)) == pytest.approx(1.0)
    with pytest.raises(NumericError):
        semantic_total_loss({"projection": float("nan"), "joint": 0.0, "alignment": 0.0})
    with pytest.raises(ValidationError):
        SemanticLossWeights(-1.0, 0.5)


def test_projection_and_alignment():
    e = torch.zeros(2, 3)
    t = torch.ones(2, 3)
    assert float(projection_loss(e, t)) == pytest.approx(3.0)
    assert float(projection_loss(e, t, "sum")) == pytest.approx(6.0)

    pred = SemanticPredictor(3, 2, 4)
    with torch.no_grad():
        pred.linear.weight.zero_()
        pred.linear.bias.zero_()
    assert pred.cond_shape == (2, 4)
    assert float(alignment_loss(pred, e, torch.ones(2, 2, 4))) == pytest.approx(8.0)
    with pytest.raises(ShapeError):
        alignment_loss(pred, e, torch.ones(2, 4, 2))


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(4)
    t = torch.randn(4, 8, generator=g, dtype=torch.float64)
    v = torch.randn(4, 8, generator=g, dtype=torch.float64)
    d = torch.randn(4, 8, generator=g, dtype=torch.float64)
    cond = torch.randn(4, 2, 3, generator=g, dtype=torch.float64)
    e = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
    log_tau = torch.tensor(math.log(0.3), dtype=torch.float64, requires_grad=True)

    torch.manual_seed(0)
    pred = SemanticPredictor(8, 2, 3).double()

    assert torch.autograd.gradcheck(lambda x, lt: softclip_loss(x, t, tau=lt.exp()), (e, log_tau))
    assert torch.autograd.gradcheck(lambda x: softclip_loss(x, t, tau=0.3, bidirectional=False), (e,))
    assert torch.autograd.gradcheck(lambda x: joint_loss(x, v, t, d, tau=0.3), (e,))
    assert torch.autograd.gradcheck(lambda x: projection_loss(x, t), (e,))
    assert torch.autograd.gradcheck(lambda x: alignment_loss(pred, x, cond), (e,))
    assert torch.autograd.gradcheck(
        lambda x: semantic_total_loss({
            "projection": projection_loss(x, t),
            "joint": joint_loss(x, v, t, d, tau=0.3),
            "alignment": alignment_loss(pred, x, cond),
        }),
        (e,),
    )


def test_training_and_checkpoint(tiny_cfg, tiny_manifest, tmp_path):
    encoder, predictor, params = build_semantic(tiny_cfg, tiny_manifest.dims)
    state = train_semantic(tiny_manifest, encoder, predictor, tiny_cfg, params)
    assert [r["epoch"] for r in state.history] == [1, 2]
    assert 0 <= state.best_epoch <= 2
    for row in state.history:
        assert set(row) >= {"projection", "joint", "alignment", "total", "tau", "val_total"}
        assert row["total"] == pytest.approx(row["projection"] + 0.01 * row["joint"] + 0.5 * row["alignment"], rel=1e-5)

    final_w = encoder.net[-1].weight.detach().clone()
    path = save_semantic_checkpoint(state, str(tmp_path / "semantic"))
    assert torch.equal(encoder.net[-1].weight, final_w)

    loaded = load_semantic_checkpoint(path)
    state.use_best()
    e_a, c_a = predict_semantic(state, tiny_manifest.test)
    e_b, c_b = predict_semantic(loaded, tiny_manifest.test)
    assert e_a.shape == (10, 8)
    assert c_a.shape == (10, 2, 4)
    assert np.allclose(e_a, e_b, atol=1e-6)
    assert np.allclose(c_a, c_b, atol=1e-6)


def test_training_is_reproducible(tiny_cfg, tiny_manifest):
    runs = []
    for _ in range(2):
        encoder, predictor, params = build_semantic(tiny_cfg, tiny_manifest.dims)
        runs.append(train_semantic(tiny_manifest, encoder, predictor, tiny_cfg, params).history)
    assert runs[0] == runs[1]


def test_training_never_sees_test_block(tiny_cfg, tiny_manifest, monkeypatch):
    seen = []
    orig = semantic._Batches

    def recording(records, dtype):
        seen.extend(r.block_id for r in records)
        return orig(records, dtype)

    monkeypatch.setattr(semantic, "_Batches", recording)
    encoder, predictor, params = build_semantic(tiny_cfg, tiny_manifest.dims)
    train_semantic(tiny_manifest, encoder, predictor, tiny_cfg, params)
    assert set(seen) == {1, 2}
    assert 3 not in seen


def test_soft_cross_entropy_ignores_row_shift():
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(4, 4, generator=g, dtype=torch.float64)
    p = torch.softmax(torch.randn(4, 4, generator=g, dtype=torch.float64), dim=-1)
    shifted = logits.clone()
    shifted[2] += 123.5
    shifted[0] -= 7.0
    assert torch.allclose(torch.softmax(shifted, dim=-1), torch.softmax(logits, dim=-1), atol=1e-12)
    assert torch.allclose(soft_cross_entropy(p, shifted), soft_cross_entropy(p, logits), atol=1e-12)


def test_alignment_gradients_wrt_predictor_weights():
    g = torch.Generator().manual_seed(6)
    e = torch.randn(3, 8, generator=g, dtype=torch.float64)
    cond = torch.randn(3, 2, 3, generator=g, dtype=torch.float64)
    torch.manual_seed(0)
    pred = SemanticPredictor(8, 2, 3).double()
    assert utils.param_gradcheck(pred, lambda fwd: alignment_loss(fwd, e, cond))


def _weights(*modules):
    return [p.detach().clone() for m in modules for p in m.state_dict().values()]


def test_zero_learning_rate_leaves_weights(tiny_cfg, tiny_manifest):
    tiny_cfg.semantic_optim.lr = 0.0
    encoder, predictor, params = build_semantic(tiny_cfg, tiny_manifest.dims)
    before = _weights(encoder, predictor, params)
    state = train_semantic(tiny_manifest, encoder, predictor, tiny_cfg, params)
    assert len(state.history) == 2
    after = _weights(encoder, predictor, params)
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_loss_falls_on_noiseless_data(tiny_cfg, tiny_manifest):
    assert tiny_cfg.data.noise_sigma == 0.0
    tiny_cfg.semantic_optim.epochs = 8
    encoder, predictor, params = build_semantic(tiny_cfg, tiny_manifest.dims)
    totals = [r["total"] for r in train_semantic(tiny_manifest, encoder, predictor, tiny_cfg, params).history]
    smooth = np.convolve(totals, np.ones(3) / 3, mode="valid")
    assert totals[-1] < totals[0]
    assert smooth[-1] < smooth[0]
