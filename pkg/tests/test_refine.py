import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignrefine import numerics as nx
from alignrefine.ctc import Vocabulary, collapse, ctc_log_likelihood
from alignrefine.data import SyntheticSpec, generate_dataset
from alignrefine.model import Batch, Model, ModelConfig
from alignrefine.numerics import Tensor
from alignrefine.refine import (
    IterationWeights,
    RefinementTrace,
    compute_loss,
    decode,
    iteration_weights,
    refinement_edit_report,
    training_step,
)
from alignrefine.train import TrainConfig, run_training

V3 = Vocabulary(("A", "B", "C"))


def tiny(enc=1, dec=1, **kw):
    base = dict(vocab=V3, enc_layers=enc, dec_layers=dec, model_dim=8, heads=2, ffn_dim=16, feature_dim=4,
                conv_channels=2)
    base.update(kw)
    return ModelConfig(**base)


def identity_decoder_model(seed=0):
    """dec_layers=0 with a one-hot embedding and a scaled identity head: argmax copies its input."""
    m = Model(tiny(dec=0), seed=seed)
    emb = np.zeros((4, 8))
    emb[np.arange(4), np.arange(4)] = 10.0
    head = np.zeros((8, 4))
    head[np.arange(4), np.arange(4)] = 10.0
    m.params["dec.embed"] = Tensor(emb)
    m.params["dec.head.w"] = Tensor(head)
    m.params["dec.head.b"] = Tensor(np.zeros(4))
    return m


# weights ----------------------------------------------------------------------

def test_weights_k4():
    w = iteration_weights(4, 0.3)
    assert w.ctc == 0.3
    r = 0.7 / 6
    np.testing.assert_allclose(w.refine, [0.35, r, r, r], rtol=0, atol=1e-15)
    assert w.ctc + sum(w.refine) == 1.0


@pytest.mark.parametrize("K,lam,expected", [(1, 0.3, [0.7]), (2, 0.5, [0.375, 0.125])])
def test_weights_examples(K, lam, expected):
    w = iteration_weights(K, lam)
    np.testing.assert_allclose(w.refine, expected, atol=1e-15)


@pytest.mark.parametrize("K,lam", [(0, 0.3), (2, 0.0), (2, 1.0), (2, -0.1)])
def test_weights_reject_invalid(K, lam):
    with pytest.raises(ValueError):
        iteration_weights(K, lam)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.floats(0.001, 0.999))
def test_weights_closure_and_ratio(K, lam):
    w = iteration_weights(K, lam)
    assert abs(w.ctc + sum(w.refine) - 1.0) <= 1e-12
    assert all(x > 0 for x in w.refine)
    for x in w.refine[1:]:
        assert abs(w.refine[0] - 3 * x) <= 1e-12


# loss -------------------------------------------------------------------------

def _batch(rng, n=2, T=12):
    return Batch(rng.normal(size=(n, T, 4)), np.array([T] * n), [[1, 2], [3]][:n])


def test_report_total_is_weighted_sum():
    m = Model(tiny(train_iterations=3), seed=0)
    w = iteration_weights(3, 0.3)
    loss, rep = compute_loss(m, _batch(np.random.default_rng(0)), w)
    expected = w.ctc * rep.ctc + sum(a * b for a, b in zip(w.refine, rep.refine))
    assert rep.total == pytest.approx(expected, abs=1e-12)
    assert loss.item() == pytest.approx(rep.total, abs=1e-12)
    assert rep.skipped == 0 and len(rep.refine) == 3


def test_zero_head_gives_uniform_refinement_loss():
    m = Model(tiny(train_iterations=1), seed=1)
    m.params["dec.head.w"] = Tensor(np.zeros((8, 4)))
    m.params["dec.head.b"] = Tensor(np.zeros(4))
    batch = _batch(np.random.default_rng(1), n=1)
    _, rep = compute_loss(m, batch, iteration_weights(1, 0.3))
    uniform = np.full((3, 4), -math.log(4))
    assert rep.refine[0] == pytest.approx(-ctc_log_likelihood(uniform, [1, 2], V3).item(), abs=1e-12)


def test_unreachable_samples_are_skipped():
    m = Model(tiny(train_iterations=1), seed=2)
    rng = np.random.default_rng(2)
    batch = Batch(rng.normal(size=(2, 4, 4)), np.array([4, 4]), [[1], [1, 1]])
    loss, rep = compute_loss(m, batch, iteration_weights(1, 0.3))
    assert rep.skipped == 1 and loss is not None
    all_bad = Batch(rng.normal(size=(1, 4, 4)), np.array([4]), [[1, 1]])
    loss, rep = compute_loss(m, all_bad, iteration_weights(1, 0.3))
    assert loss is None and not rep.applied


def test_argmax_blocks_gradient_into_previous_stage():
    m = Model(tiny(train_iterations=1), seed=3)
    batch = _batch(np.random.default_rng(3))
    training_step(m, batch, IterationWeights(0.3, (0.0,)))
    for name, p in m.params.items():
        if name.startswith("dec."):
            assert p.grad is None or not p.grad.any(), name
    enc_grads = {k: p.grad.copy() for k, p in m.params.items() if k.startswith("enc.")}

    # the encoder sees exactly the gradient of its own CTC term
    m.zero_grad()
    enc = m.encoder_forward(batch)
    from alignrefine.ctc import ctc_batch_log_likelihood

    ll, _ = ctc_batch_log_likelihood(enc.logp, enc.frame_lengths, batch.targets, 0)
    nx.backward(nx.mul(nx.sum_(ll), -0.3 / 2))
    for k, g in enc_grads.items():
        np.testing.assert_allclose(m.params[k].grad, g, atol=1e-13)


def test_refinement_gradient_does_not_reach_encoder_head_through_argmax():
    m = Model(tiny(train_iterations=1), seed=4)
    batch = _batch(np.random.default_rng(4))
    training_step(m, batch, IterationWeights(1e-9, (1.0,)))
    g_small = m.params["enc.head.w"].grad.copy()
    # the head only feeds the CTC term and the detached argmax, so its gradient scales with lambda
    assert np.abs(g_small).max() < 1e-6


def test_smoke_training_halves_loss():
    ds = generate_dataset(SyntheticSpec(count=50, seed=1, noise_sigma=0.3, vocab_size=6))
    mc = ModelConfig(vocab=ds.vocab, enc_layers=2, dec_layers=1, model_dim=32, heads=2, ffn_dim=64,
                     dropout_p=0.0, train_iterations=2)
    tc = TrainConfig(total_steps=200, warmup_steps=50, lr_factor=1.0, batch_size=10, seed=0,
                     checkpoint_interval=50)
    res = run_training(tc, mc, ds)
    first = np.mean([r["total"] for r in res.reports[:5]])
    last = np.mean([r["total"] for r in res.reports[-5:]])
    assert last < 0.5 * first


# decoding ---------------------------------------------------------------------

def test_k0_is_encoder_greedy():
    m = Model(tiny(), seed=5)
    f = np.random.default_rng(5).normal(size=(20, 4))
    tr = decode(m, f, 0)
    assert tr.exit_iteration == 0 and len(tr.alignments) == 1
    enc = m.encoder_forward(Batch.single(f))
    assert tr.hypothesis == collapse(np.argmax(enc.logp.data[0], axis=1), V3)


def test_identity_decoder_exits_at_first_iteration():
    m = identity_decoder_model()
    tr = decode(m, np.random.default_rng(6).normal(size=(30, 4)), 10)
    assert tr.exit_iteration == 1 and tr.converged and tr.exited_early
    assert np.array_equal(tr.alignments[1], tr.alignments[0])


def test_budget_without_convergence_runs_to_k_max():
    m = Model(tiny(), seed=7)
    for seed in range(10):
        tr = decode(m, np.random.default_rng(seed).normal(size=(40, 4)), 3)
        assert tr.exit_iteration <= 3
        assert len({len(a) for a in tr.alignments}) == 1
        if tr.converged:
            assert np.array_equal(tr.alignments[-1], tr.alignments[-2])
        else:
            assert tr.exit_iteration == 3


def test_early_exit_is_fixed_point_and_budget_monotone():
    m = Model(tiny(), seed=8)
    for seed in range(10):
        f = np.random.default_rng(seed).normal(size=(40, 4))
        tr = decode(m, f, 10)
        if not tr.converged:
            continue
        enc = m.encoder_forward(Batch.single(f))
        again = np.argmax(m.decoder_forward(tr.alignments[-1][None], enc).data[0], axis=1)
        assert np.array_equal(again, tr.alignments[-1])
        assert decode(m, f, tr.exit_iteration).hypothesis == tr.hypothesis


def test_collapse_exit_is_a_relaxation():
    m = Model(tiny(), seed=9)
    f = np.random.default_rng(9).normal(size=(40, 4))
    assert decode(m, f, 10, exit_on="collapse").exit_iteration <= decode(m, f, 10).exit_iteration
    with pytest.raises(ValueError):
        decode(m, f, 10, exit_on="bogus")
    with pytest.raises(ValueError):
        decode(m, f, -1)


def test_decode_bit_deterministic():
    m = Model(tiny(), seed=10)
    f = np.random.default_rng(10).normal(size=(33, 4))
    a, b = decode(m, f, 5), decode(m, f, 5)
    assert a.exit_iteration == b.exit_iteration
    for x, y in zip(a.alignments, b.alignments):
        assert np.array_equal(x, y)


# edit report ------------------------------------------------------------------

def _trace(*alignments):
    al = [np.array(a) for a in alignments]
    return RefinementTrace(al, [collapse(a, V3) for a in al], len(al) - 1, len(al) - 1, False)


def test_edit_report_identical_pair():
    (e,) = refinement_edit_report(_trace([1, 0, 2], [1, 0, 2]))
    assert e.frame_edits == 0 and not e.null_edit


def test_edit_report_shift_is_null_edit():
    (e,) = refinement_edit_report(_trace([1, 0], [0, 1]))
    assert e.frame_edits == 2 and e.null_edit and e.reversals == 1


def test_edit_report_against_frame_diff():
    rng = np.random.default_rng(11)
    for _ in range(100):
        T = int(rng.integers(1, 10))
        seq = [rng.integers(0, 4, size=T) for _ in range(int(rng.integers(2, 5)))]
        report = refinement_edit_report(_trace(*seq))
        for k, e in enumerate(report, start=1):
            diffs = [t for t in range(T) if seq[k][t] != seq[k - 1][t]]
            assert e.frame_edits == len(diffs)
            assert e.reversals == sum(1 for t in diffs if seq[k - 1][t] != 0)
            assert e.null_edit == (bool(diffs) and collapse(seq[k], V3) == collapse(seq[k - 1], V3))
