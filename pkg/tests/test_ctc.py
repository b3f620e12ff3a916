import itertools
import math

import numpy as np
import pytest
from conftest import random_logprobs
from hypothesis import given, settings
from hypothesis import strategies as st

from alignrefine import numerics as nx
from alignrefine.ctc import (
    Vocabulary,
    collapse,
    ctc_batch_log_likelihood,
    ctc_log_likelihood,
    enumerate_alignments,
    forced_alignment,
    greedy_alignment,
    min_alignment_length,
    token_confidences,
)
from alignrefine.numerics import Tensor, grad_check


def enc(v, s):
    return v.encode(s)


def brute_likelihood(lp, y, v):
    """Sum of path probabilities over every alignment that collapses to y."""
    T = lp.shape[0]
    total = 0.0
    for a in itertools.product(range(v.size), repeat=T):
        if collapse(a, v) == list(y):
            total += math.exp(sum(lp[t, a[t]] for t in range(T)))
    return total


# vocabulary -------------------------------------------------------------------

def test_vocabulary_extended_alphabet(vocab_ab):
    assert vocab_ab.size == 3
    assert vocab_ab.symbols == ["_", "A", "B"]
    assert [vocab_ab.id_of(s) for s in vocab_ab.symbols] == [0, 1, 2]
    with pytest.raises(ValueError):
        Vocabulary(("A", "A"))
    with pytest.raises(ValueError):
        Vocabulary(("A", "_"))


def test_vocabulary_nonzero_blank():
    v = Vocabulary(("A", "B"), blank_id=2)
    assert v.symbols == ["A", "B", "_"]
    assert collapse(v.encode("A_AB"), v) == v.encode("AAB")


# collapse ---------------------------------------------------------------------

def test_collapse_worked_example(vocab_ab):
    assert vocab_ab.decode(collapse(enc(vocab_ab, "AB__BB_A"), vocab_ab)) == list("ABBA")


def test_collapse_all_blank(vocab_ab):
    assert collapse(enc(vocab_ab, "____"), vocab_ab) == []


def test_blank_separates_repeats(vocab_ab):
    assert collapse(enc(vocab_ab, "A_A"), vocab_ab) == enc(vocab_ab, "AA")
    assert collapse(enc(vocab_ab, "AA"), vocab_ab) == enc(vocab_ab, "A")


def test_collapse_rejects_out_of_range(vocab_ab):
    with pytest.raises(ValueError):
        collapse([0, 3], vocab_ab)


# enumeration ------------------------------------------------------------------

def _strings(ids, v):
    return {"".join(v.decode(a)) for a in ids}


def test_enumerate_single_label(vocab_ab):
    assert _strings(enumerate_alignments(enc(vocab_ab, "A"), 2, vocab_ab), vocab_ab) == {"A_", "_A", "AA"}


def test_enumerate_two_labels(vocab_ab):
    got = _strings(enumerate_alignments(enc(vocab_ab, "AB"), 3, vocab_ab), vocab_ab)
    assert got == {"AB_", "_AB", "A_B", "ABB", "AAB"}


def test_enumerate_repeat_needs_blank(vocab_ab):
    assert enumerate_alignments(enc(vocab_ab, "AA"), 2, vocab_ab) == set()
    assert _strings(enumerate_alignments(enc(vocab_ab, "AA"), 3, vocab_ab), vocab_ab) == {"A_A"}


def test_enumerate_budget(vocab_ab):
    with pytest.raises(ValueError, match="budget"):
        enumerate_alignments([1], 13, vocab_ab)
    with pytest.raises(ValueError, match="budget"):
        enumerate_alignments([1], 8, Vocabulary(tuple("ABCDEFGHI")))


def test_enumeration_is_exact_preimage(vocab_ab):
    for T in range(1, 7):
        groups = {}
        for a in itertools.product(range(vocab_ab.size), repeat=T):
            groups.setdefault(tuple(collapse(a, vocab_ab)), set()).add(a)
        for y, preimage in groups.items():
            assert enumerate_alignments(y, T, vocab_ab) == preimage
            assert min_alignment_length(y) <= T


# likelihood -------------------------------------------------------------------

def test_uniform_single_label():
    v = Vocabulary(("A", "B"))
    lp = np.full((2, 3), -math.log(3))
    n = len(enumerate_alignments([1], 2, v))
    assert n == 3
    assert ctc_log_likelihood(lp, [1], v).item() == pytest.approx(math.log(n / 9), abs=1e-12)
    assert ctc_log_likelihood(lp, [1], v).item() == pytest.approx(-math.log(3), abs=1e-12)


def test_empty_target_is_all_blank(vocab_ab):
    rng = np.random.default_rng(0)
    lp = random_logprobs(rng, 5, 3)
    assert ctc_log_likelihood(lp, [], vocab_ab).item() == pytest.approx(lp[:, 0].sum(), abs=1e-12)


def test_unreachable_is_minus_infinity(vocab_ab):
    lp = np.full((2, 3), -math.log(3))
    assert ctc_log_likelihood(lp, enc(vocab_ab, "AA"), vocab_ab) == -math.inf


def test_batch_unreachable_is_flagged_not_crash(vocab_ab):
    rng = np.random.default_rng(1)
    lp = Tensor(np.stack([random_logprobs(rng, 3, 3), random_logprobs(rng, 3, 3)]), requires_grad=True)
    lls, ok = ctc_batch_log_likelihood(lp, [3, 2], [[1, 2], [1, 1]], 0)
    assert ok.tolist() == [True, False]
    assert lls.data[1] == 0.0
    nx.backward(nx.sum_(lls))
    assert np.all(lp.grad[1] == 0.0)


def test_rejects_unnormalized_rows(vocab_ab):
    with pytest.raises(ValueError, match="normalized"):
        ctc_log_likelihood(np.zeros((3, 3)), [1], vocab_ab)


def test_dp_matches_enumeration_random(vocab_ab):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(60):
        T = int(rng.integers(1, 8))
        y = list(rng.integers(1, 3, size=int(rng.integers(0, 4))))
        lp = random_logprobs(rng, T, 3, scale=2.0)
        brute = brute_likelihood(lp, y, vocab_ab)
        ll = ctc_log_likelihood(lp, y, vocab_ab)
        if brute == 0.0:
            assert ll == -math.inf
            continue
        worst = max(worst, abs(math.exp(ll.item()) - brute) / brute)
    assert worst < 1e-9


def test_uniform_normalization_over_all_outputs(vocab_ab):
    for T in range(1, 6):
        lp = np.full((T, 3), -math.log(3))
        outputs = {tuple(collapse(a, vocab_ab)) for a in itertools.product(range(3), repeat=T)}
        total = sum(math.exp(ctc_log_likelihood(lp, y, vocab_ab).item()) for y in outputs)
        assert total == pytest.approx(1.0, abs=1e-12)


def test_ctc_gradient_wrt_logits():
    v = Vocabulary(("A", "B", "C"))
    rng = np.random.default_rng(11)
    y = [1, 3, 3]

    def loss(x):
        return nx.mul(ctc_log_likelihood(nx.log_softmax(x), y, v), -1.0)

    assert grad_check(loss, Tensor(rng.normal(size=(6, 4))), 1e-6) < 1e-4


# greedy -----------------------------------------------------------------------

def test_greedy_one_hot():
    a = np.array([0, 2, 2, 1, 0])
    lp = np.full((5, 3), -50.0)
    lp[np.arange(5), a] = 0.0
    np.testing.assert_array_equal(greedy_alignment(lp), a)


def test_greedy_uniform_ties_to_lowest():
    np.testing.assert_array_equal(greedy_alignment(np.full((4, 3), -math.log(3))), [0, 0, 0, 0])


def test_greedy_matches_row_scan():
    rng = np.random.default_rng(2)
    lp = random_logprobs(rng, 20, 5)
    expected = []
    for row in lp:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        expected.append(best)
    np.testing.assert_array_equal(greedy_alignment(lp), expected)
    assert np.array_equal(greedy_alignment(lp), greedy_alignment(lp.copy()))


# confidences ------------------------------------------------------------------

def test_confidences_one_hot(vocab_ab):
    a = enc(vocab_ab, "AA_B")
    lp = np.full((4, 3), -60.0)
    lp[np.arange(4), a] = 0.0
    assert token_confidences(lp, a, vocab_ab) == pytest.approx([1.0, 1.0])


def test_confidences_all_blank(vocab_ab):
    lp = np.full((3, 3), -math.log(3))
    assert token_confidences(lp, [0, 0, 0], vocab_ab) == []


def test_confidences_run_maxima(vocab_ab):
    probs = np.array([
        [0.2, 0.6, 0.2],   # A
        [0.1, 0.7, 0.2],   # A
        [0.5, 0.3, 0.2],   # _
        [0.2, 0.2, 0.6],   # B
        [0.3, 0.4, 0.3],   # A
    ])
    lp = np.log(probs)
    a = greedy_alignment(lp)
    assert vocab_ab.decode(a) == list("AA_BA")
    assert token_confidences(lp, a, vocab_ab) == pytest.approx([0.7, 0.6, 0.4])
    assert token_confidences(lp, a, vocab_ab, reduce="min") == pytest.approx([0.6, 0.6, 0.4])


def test_confidences_length_mismatch(vocab_ab):
    with pytest.raises(ValueError):
        token_confidences(np.zeros((3, 3)), [0, 1], vocab_ab)


# forced alignment ------------------------------------------------------------

def test_forced_alignment_is_best_path(vocab_ab):
    rng = np.random.default_rng(3)
    for _ in range(20):
        T = int(rng.integers(2, 7))
        y = list(rng.integers(1, 3, size=int(rng.integers(1, 3))))
        if min_alignment_length(y) > T:
            continue
        lp = random_logprobs(rng, T, 3, scale=2.0)
        paths = enumerate_alignments(y, T, vocab_ab)
        best = max(sum(lp[t, a[t]] for t in range(T)) for a in paths)
        got = forced_alignment(lp, y, vocab_ab)
        assert collapse(got, vocab_ab) == y
        assert sum(lp[t, got[t]] for t in range(T)) == pytest.approx(best, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=9))
def test_blank_interleaving_is_a_right_inverse(a):
    v = Vocabulary(("A", "B"))
    y = collapse(a, v)
    spaced = [s for t in y for s in (0, t)] + [0]
    assert collapse(spaced, v) == y
    assert min_alignment_length(y) <= len(a)
    assert all(t != v.blank_id for t in y)
