import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rehydil import tensor as T
from rehydil.gradcheck import finite_difference_check
from rehydil.losses import (PredictionEntry, TverskyParams, contrastive_from_similarity,
                            cosine_similarity, focal_tversky_loss, intra_loss, tac_loss,
                            total_loss, tversky_dice_loss, tversky_similarity)
from rehydil.tensor import ShapeError, Tensor

TINY = TverskyParams(0.7, 1.5, epsilon=1e-12)
G = np.array([1.0, 1.0, 0.0, 0.0])
U = np.array([1.0, 0.0, 1.0, 0.0])


def soft_dice(g, u, eps):
    return (2 * np.dot(g, u) + 2 * eps) / (g.sum() + u.sum() + 2 * eps)


def test_hand_value():
    assert tversky_similarity(G, U, TINY).item() == pytest.approx(1 / 3.2, abs=1e-11)
    assert tversky_similarity(G, U, TINY).item() == pytest.approx(0.3125, abs=1e-11)


def test_loss_hand_values():
    g = Tensor(G.reshape(1, 2, 2))
    u = U.reshape(1, 2, 2)
    assert tversky_dice_loss(g, u, TINY).item() == pytest.approx(0.6875, abs=1e-11)
    assert focal_tversky_loss(g, u, TINY, gamma=1.2).item() == pytest.approx(0.6875 ** 1.2, abs=1e-11)
    assert focal_tversky_loss(g, u, TINY, gamma=1.2).item() == pytest.approx(0.63786, abs=1e-5)
    assert intra_loss(g, u, TINY, gamma=1.2).item() == pytest.approx(1.32536, abs=1e-5)


def test_perfect_and_disjoint():
    m = np.array([1.0, 0, 1, 1, 0])
    assert tversky_similarity(m, m).item() == 1.0
    s = tversky_similarity(m, 1 - m).item()
    assert s == pytest.approx(1e-6 / (0.7 * 3 + 1.5 * 2 + 1e-6))
    pred = Tensor(np.stack([m.reshape(1, 5)] * 2))
    assert tversky_dice_loss(pred, pred.data).item() == 0.0
    assert intra_loss(pred, pred.data).item() == 0.0


def test_empty_masks_have_unit_similarity():
    z = np.zeros(6)
    assert tversky_similarity(z, z).item() == 1.0
    assert focal_tversky_loss(Tensor(z.reshape(1, 2, 3)), z.reshape(1, 2, 3)).item() == 0.0


def test_gamma_one_identities():
    rng = np.random.default_rng(0)
    p = Tensor(rng.uniform(size=(3, 4, 4)))
    t = (rng.uniform(size=(3, 4, 4)) > 0.5).astype(float)
    dt = tversky_dice_loss(p, t).item()
    assert focal_tversky_loss(p, t, gamma=1.0).item() == pytest.approx(dt, abs=1e-15)
    assert intra_loss(p, t, gamma=1.0).item() == pytest.approx(2 * dt, abs=1e-15)


def test_validation_errors():
    with pytest.raises(ShapeError):
        tversky_similarity(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        tversky_similarity(np.array([1.2, 0.0]), np.ones(2))
    with pytest.raises(ValueError):
        tversky_similarity(np.array([np.nan, 0.0]), np.ones(2))
    with pytest.raises(ValueError):
        TverskyParams(alpha=-0.1)
    with pytest.raises(ValueError):
        TverskyParams(epsilon=0.0)
    with pytest.raises(ValueError):
        focal_tversky_loss(Tensor(np.ones((1, 2, 2))), np.ones((1, 2, 2)), gamma=0.0)
    with pytest.raises(ShapeError):
        tversky_dice_loss(Tensor(np.ones((2, 2, 2))), np.ones((1, 2, 2)))


def test_equal_weights_reduce_to_dice():
    rng = np.random.default_rng(11)
    params = TverskyParams(0.5, 0.5, 1e-6)
    for _ in range(100):
        n = int(rng.integers(4, 64))
        g = (rng.uniform(size=n) > rng.uniform()).astype(float)
        u = (rng.uniform(size=n) > rng.uniform()).astype(float)
        got = tversky_similarity(g, u, params).item()
        assert abs(got - soft_dice(g, u, 1e-6)) < 1e-12


_unit = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_unit, _unit), min_size=1, max_size=30),
       st.floats(0, 3), st.floats(0, 3))
def test_similarity_in_unit_interval(pairs, alpha, beta):
    g, u = np.array(pairs).T
    s = tversky_similarity(g, u, TverskyParams(alpha, beta)).item()
    assert 0.0 <= s <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_unit, _unit), min_size=1, max_size=30),
       st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 2))
def test_beta_monotonicity(pairs, alpha, beta, step):
    g, u = np.array(pairs).T
    fn = np.dot(1 - g, u)
    assume(fn > 1e-6)
    lo = tversky_similarity(g, u, TverskyParams(alpha, beta)).item()
    hi = tversky_similarity(g, u, TverskyParams(alpha, beta + step)).item()
    assert hi < lo


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1.0, 3.0))
def test_loss_ranges(seed, gamma):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(size=(2, 3, 4, 4)))
    t = (rng.uniform(size=(2, 3, 4, 4)) > 0.6).astype(float)
    dt = tversky_dice_loss(p, t).item()
    ft = focal_tversky_loss(p, t, gamma=gamma).item()
    assert 0.0 <= ft <= dt <= 1.0


def test_per_sample_reduction():
    rng = np.random.default_rng(2)
    p = Tensor(rng.uniform(size=(3, 2, 4, 4)))
    t = (rng.uniform(size=(3, 2, 4, 4)) > 0.5).astype(float)
    per = intra_loss(p, t, reduce="none").data
    assert per.shape == (3,)
    for b in range(3):
        assert per[b] == pytest.approx(intra_loss(Tensor(p.data[b]), t[b]).item(), abs=1e-14)
    assert intra_loss(p, t).item() == pytest.approx(per.mean(), abs=1e-14)


def test_asymmetry_is_allowed():
    g = np.array([1.0, 1.0, 1.0, 0.0])
    u = np.array([1.0, 0.0, 0.0, 0.0])
    assert tversky_similarity(g, u).item() != tversky_similarity(u, g).item()
    sym = TverskyParams(0.6, 0.6)
    assert tversky_similarity(g, u, sym).item() == pytest.approx(tversky_similarity(u, g, sym).item())


def test_cosine_similarity():
    assert cosine_similarity(G, G).item() == pytest.approx(1.0, abs=1e-6)
    assert cosine_similarity(G, U).item() == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_intra_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4, 4)))
    t = (rng.uniform(size=(2, 3, 4, 4)) > 0.5).astype(float)
    for f in (lambda: tversky_dice_loss(p, t), lambda: focal_tversky_loss(p, t, gamma=1.2)):
        rep = finite_difference_check(f, [p])
        assert rep.passed, rep.max_rel_error


def test_total_loss():
    intra = Tensor(1.3)
    assert total_loss(Tensor(5.0), intra, 0.0) is intra
    assert total_loss(0.3, 1.3, 1.0) == pytest.approx(1.6)
    assert total_loss(Tensor(0.3), Tensor(1.3), 1.0).item() == pytest.approx(1.6)
    assert total_loss(0.0, 0.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        total_loss(0.0, 0.0, -1.0)


# -- contrastive ----------------------------------------------------------

def test_contrastive_scalar_oracles():
    S = Tensor([[1.0, 0.0]])
    loss, _ = contrastive_from_similarity(S, np.array([[True, False]]), np.array([[False, True]]))
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-14)
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)
    S = Tensor([[0.4, 0.4]])
    loss, _ = contrastive_from_similarity(S, np.array([[True, False]]), np.array([[False, True]]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-14)
    loss, _ = contrastive_from_similarity(S, np.array([[True, False]]), np.zeros((1, 2), bool))
    assert loss.item() == pytest.approx(0.0, abs=1e-15)


def _entry(rng, patient, classes=2, size=3, grad=False):
    return PredictionEntry(Tensor(rng.uniform(size=(classes, size, size)), requires_grad=grad),
                           patient, "T1", "current_stage" if grad else "previous_stage")


def softmax_tac_oracle(replay, current, params, tau):
    """Anchors from both queues, loop form, direct use of tversky_similarity."""
    terms = []
    for anchors, others in ((replay, current), (current, replay)):
        for a in anchors:
            for c in range(a.probs.shape[0]):
                pos, neg = [], []
                for o in others:
                    if o.patient == a.patient:
                        continue
                    for z in range(o.probs.shape[0]):
                        s = tversky_similarity(a.probs.data[c], o.probs.data[z], params).item() / tau
                        (pos if z == c else neg).append(s)
                if not pos:
                    continue
                neg_sum = sum(math.exp(s) for s in neg)
                terms.append(np.mean([-math.log(math.exp(s) / (math.exp(s) + neg_sum)) for s in pos]))
    return float(np.mean(terms))


@pytest.mark.parametrize("seed", range(10))
def test_tac_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    patients = [f"P{i}" for i in rng.integers(0, 4, size=2 * n)]
    replay = [_entry(rng, patients[i], 3) for i in range(n)]
    current = [_entry(rng, patients[n + i], 3, grad=True) for i in range(n)]
    params = TverskyParams(0.7, 1.5)
    tau = float(rng.uniform(0.5, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = tac_loss(replay, current, params, tau)
        if res.degenerate:
            return
    assert res.loss.item() == pytest.approx(softmax_tac_oracle(replay, current, params, tau), abs=1e-12)


def test_tac_degenerate_bank_warns():
    rng = np.random.default_rng(0)
    with pytest.warns(RuntimeWarning):
        res = tac_loss([_entry(rng, "A")], [_entry(rng, "A", grad=True)])
    assert res.degenerate and res.loss.item() == 0.0


def test_tac_invariances():
    rng = np.random.default_rng(5)
    replay = [_entry(rng, p) for p in "ABC"]
    current = [_entry(rng, p, grad=True) for p in "BCD"]
    base = tac_loss(replay, current).loss.item()
    # negatives reordered
    assert tac_loss(replay[::-1], current[::-1]).loss.item() == pytest.approx(base, abs=1e-13)
    # every (entry, class) map of both queues anchors once
    assert tac_loss(replay, current).anchors == 2 * 3 * 2


def test_tac_duplicate_anchor_set_is_invariant():
    """Duplicating every anchor (with its own positives/negatives) leaves the mean unchanged."""
    rng = np.random.default_rng(6)
    S = Tensor(rng.uniform(size=(3, 5)))
    pos = rng.uniform(size=(3, 5)) > 0.6
    pos[:, 0] = True
    neg = ~pos
    a, _ = contrastive_from_similarity(S, pos, neg, 1.0)
    S2 = Tensor(np.concatenate([S.data, S.data]))
    b, _ = contrastive_from_similarity(S2, np.concatenate([pos, pos]), np.concatenate([neg, neg]), 1.0)
    assert b.item() == pytest.approx(a.item(), abs=1e-14)
    perm = rng.permutation(5)
    c, _ = contrastive_from_similarity(Tensor(S.data[:, perm]), pos[:, perm], neg[:, perm], 1.0)
    assert c.item() == pytest.approx(a.item(), abs=1e-14)


def test_tac_no_gradient_into_replay_queue():
    rng = np.random.default_rng(7)
    replay = [_entry(rng, p) for p in "AB"]
    current = [_entry(rng, p, grad=True) for p in "BC"]
    tac_loss(replay, current).loss.backward()
    assert all(not e.probs.requires_grad and e.probs.grad is None for e in replay)
    assert all(e.probs.grad is not None for e in current)


@pytest.mark.parametrize("similarity", ["tversky", "cosine"])
@pytest.mark.parametrize("seed", range(20))
def test_tac_gradients(seed, similarity):
    rng = np.random.default_rng(seed)
    replay = [_entry(rng, p, 2, 2) for p in "AB"]
    current = [PredictionEntry(Tensor(rng.uniform(0.1, 0.9, size=(2, 2, 2))), p, "T2", "current_stage")
               for p in "BC"]
    leaves = [e.probs for e in current]
    rep = finite_difference_check(lambda: tac_loss(replay, current, similarity=similarity, tau=0.7).loss, leaves)
    assert rep.passed, rep.max_rel_error
