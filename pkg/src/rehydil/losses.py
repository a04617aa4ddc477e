"""Tversky similarity, intra-modality losses and the Tversky-aware contrastive loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class TverskyParams:
    """FP weight ``alpha``, FN weight ``beta`` and smoothing ``epsilon``."""

    alpha: float = 0.7
    beta: float = 1.5
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class PredictionEntry:
    probs: Tensor            # classes×H×W in [0, 1]
    patient: str
    modality: str
    source_model: str        # "previous_stage" | "current_stage"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_unit_interval(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} has values outside [0, 1]")


def _tversky_from_sums(tp: Tensor, sum_g: Tensor, sum_u: Tensor, params: TverskyParams) -> Tensor:
    # FP mass = <g, 1-u> = Σg - tp ; FN mass = <1-g, u> = Σu - tp
    fp = T.sub(sum_g, tp)
    fn = T.sub(sum_u, tp)
    num = T.add_scalar(tp, params.epsilon)
    den = T.add(T.add(num, T.mul_scalar(fp, params.alpha)), T.mul_scalar(fn, params.beta))
    return T.div(num, den)


def tversky_similarity(g, u, params: TverskyParams = TverskyParams()) -> Tensor:
    """Soft Tversky index between two [0,1] maps of equal size (any shape, flattened)."""
    g, u = _as_tensor(g), _as_tensor(u)
    if g.size != u.size:
        raise ShapeError("tversky_similarity", g.shape, u.shape)
    _check_unit_interval("g", g.data)
    _check_unit_interval("u", u.data)
    g = T.reshape(g, (g.size,))
    u = T.reshape(u, (u.size,))
    tp = T.sum(T.mul(g, u))
    return _tversky_from_sums(tp, T.sum(g), T.sum(u), params)


def cosine_similarity(g, u, epsilon: float = 1e-6) -> Tensor:
    g, u = _as_tensor(g), _as_tensor(u)
    if g.size != u.size:
        raise ShapeError("cosine_similarity", g.shape, u.shape)
    g = T.reshape(g, (g.size,))
    u = T.reshape(u, (u.size,))
    dot = T.sum(T.mul(g, u))
    norms = T.power(T.mul(T.sum(T.mul(g, g)), T.sum(T.mul(u, u))), 0.5)
    return T.div(dot, T.add_scalar(norms, epsilon))


def class_similarities(pred: Tensor, target, params: TverskyParams) -> Tensor:
    """Per-(sample, class) Tversky index; pred and target are [B×]K×H×W, pred as g."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("tversky_loss", pred.shape, target.shape)
    if pred.ndim not in (3, 4):
        raise ShapeError("tversky_loss", pred.shape, detail="expected K×H×W or B×K×H×W")
    _check_unit_interval("pred", pred.data)
    _check_unit_interval("target", target.data)
    axes = (-2, -1)
    tp = T.sum(T.mul(pred, target), axis=axes)
    return _tversky_from_sums(tp, T.sum(pred, axis=axes), T.sum(target, axis=axes), params)


def _per_sample(loss_per_class: Tensor, reduce: str) -> Tensor:
    per_sample = T.mean(loss_per_class, axis=-1) if loss_per_class.ndim else loss_per_class
    if reduce == "none":
        return per_sample
    if reduce == "mean":
        return T.mean(per_sample)
    raise ValueError(f"unknown reduction {reduce!r}")


def tversky_dice_loss(pred: Tensor, target, params: TverskyParams = TverskyParams(),
                      reduce: str = "mean") -> Tensor:
    """1 - mean over classes of the Tversky index."""
    s = class_similarities(pred, target, params)
    return _per_sample(T.rsub_scalar(1.0, s), reduce)


def focal_tversky_loss(pred: Tensor, target, params: TverskyParams = TverskyParams(),
                       gamma: float = 1.2, reduce: str = "mean") -> Tensor:
    """Mean over classes of (1 - S_c)^gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    s = class_similarities(pred, target, params)
    # S can exceed 1 by rounding only when both maps are empty
    return _per_sample(T.power(T.clamp(T.rsub_scalar(1.0, s), 0.0, 1.0), gamma), reduce)


def intra_loss(pred: Tensor, target, params: TverskyParams = TverskyParams(),
               gamma: float = 1.2, reduce: str = "mean") -> Tensor:
    """Tversky-Dice plus Focal-Tversky, sharing one similarity evaluation."""
    s = class_similarities(pred, target, params)
    one_minus = T.rsub_scalar(1.0, s)
    focal = T.power(T.clamp(one_minus, 0.0, 1.0), gamma)
    return T.add(_per_sample(one_minus, reduce), _per_sample(focal, reduce))


def total_loss(tac, intra, omega: float):
    """omega · L_TAC + L_intra; accepts tensors or floats."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    if isinstance(intra, Tensor):
        if omega == 0:
            return intra
        return T.add(T.mul_scalar(tac, omega), intra) if isinstance(tac, Tensor) else T.add_scalar(intra, omega * tac)
    tac_v = tac.item() if isinstance(tac, Tensor) else tac
    return omega * tac_v + intra


# ---------------------------------------------------------------------------
# contrastive loss over the balanced queue
# ---------------------------------------------------------------------------

def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def pairwise_tversky(A: Tensor, U: Tensor, params: TverskyParams) -> Tensor:
    """S[i, j] = S_tve(A_i, U_j) for row-stacked flattened maps (A as g)."""
    tp = T.matmul(A, T.transpose(U))
    n_a, n_u = tp.shape
    sum_g = T.matmul(T.sum(A, axis=1, keepdims=True), _ones((1, n_u)))
    sum_u = T.matmul(_ones((n_a, 1)), T.reshape(T.sum(U, axis=1), (1, n_u)))
    return _tversky_from_sums(tp, sum_g, sum_u, params)


def pairwise_cosine(A: Tensor, U: Tensor, epsilon: float = 1e-6) -> Tensor:
    dot = T.matmul(A, T.transpose(U))
    n_a, n_u = dot.shape
    na = T.power(T.sum(T.mul(A, A), axis=1, keepdims=True), 0.5)
    nu = T.power(T.reshape(T.sum(T.mul(U, U), axis=1), (1, n_u)), 0.5)
    norms = T.matmul(na, nu)
    return T.div(dot, T.add_scalar(norms, epsilon))


def contrastive_from_similarity(S: Tensor, positive: np.ndarray, negative: np.ndarray,
                                tau: float = 1.0, per_anchor: bool = False):
    """Softmax contrastive loss from a similarity matrix and boolean pair masks.

    For anchor a and each positive j: -log(e^{S_aj/τ} / (e^{S_aj/τ} + Σ_neg e^{S_ak/τ})).
    Terms are averaged over an anchor's positives, then over anchors that
    have at least one positive.  Returns ``(loss, valid_anchor_mask)``; with
    ``per_anchor`` the first item is an n_a×1 tensor of anchor losses
    (zero for anchors without positives).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    positive = np.asarray(positive, dtype=bool)
    negative = np.asarray(negative, dtype=bool)
    if positive.shape != S.shape or negative.shape != S.shape:
        raise ShapeError("contrastive", S.shape, positive.shape, negative.shape)
    n_a, n_u = S.shape
    n_pos = positive.sum(axis=1)
    valid = n_pos > 0
    logits = T.mul_scalar(S, 1.0 / tau)
    E = T.exp(logits)
    neg_sum = T.matmul(T.mul(E, Tensor(negative.astype(np.float64))), _ones((n_u, 1)))   # n_a×1
    rows, cols = np.nonzero(positive)
    if rows.size == 0:
        return (Tensor(np.zeros((n_a, 1))) if per_anchor else Tensor(0.0)), valid
    flat_idx = rows * n_u + cols
    pos_logit = T.take(T.reshape(logits, (n_a * n_u,)), flat_idx)
    pos_exp = T.take(T.reshape(E, (n_a * n_u,)), flat_idx)
    denom = T.add(pos_exp, T.take(T.reshape(neg_sum, (n_a,)), rows))
    terms = T.sub(T.log(denom), pos_logit)
    if per_anchor:
        # scatter-mean terms back to their anchors
        agg = np.zeros((n_a, rows.size))
        agg[rows, np.arange(rows.size)] = 1.0 / n_pos[rows]
        return T.matmul(Tensor(agg), T.reshape(terms, (rows.size, 1))), valid
    weights = 1.0 / (n_pos[rows] * valid.sum())
    return T.sum(T.mul(terms, Tensor(weights))), valid


def _stack(entries: Sequence[PredictionEntry]) -> tuple[Tensor, list[tuple[int, int]]]:
    """Row-stack every (entry, class) map; returns the matrix and (entry, class) labels."""
    rows = []
    labels = []
    for i, e in enumerate(entries):
        K = e.probs.shape[0]
        rows.append(T.reshape(e.probs, (K, e.probs.size // K)))
        labels.extend((i, c) for c in range(K))
    return T.concat(rows, axis=0), labels


def _pair_masks(anchor_entries, anchor_labels, other_entries, other_labels):
    pa = np.array([anchor_entries[i].patient for i, _ in anchor_labels])
    ca = np.array([c for _, c in anchor_labels])
    po = np.array([other_entries[i].patient for i, _ in other_labels])
    co = np.array([c for _, c in other_labels])
    diff_patient = pa[:, None] != po[None, :]
    same_class = ca[:, None] == co[None, :]
    return diff_patient & same_class, diff_patient & ~same_class


@dataclass
class TacResult:
    loss: Tensor
    degenerate: bool
    anchors: int


def tac_loss(replay_queue: Sequence[PredictionEntry], current_queue: Sequence[PredictionEntry],
             params: TverskyParams = TverskyParams(), tau: float = 1.0,
             similarity: str = "tversky", per_entry: bool = False):
    """Tversky-aware contrastive loss over the two queues of a balanced bank.

    Every (entry, class) map in either queue is an anchor against the other
    queue.  Positives share the class with a different patient; negatives
    differ in both patient and class.  The anchor is the first argument of
    the similarity.  Returns a :class:`TacResult`; with ``per_entry`` the
    result instead maps each current-queue entry index to the mean loss of
    its anchors (used for per-sample replay scoring).
    """
    if not replay_queue or not current_queue:
        raise ValueError("both queues must be non-empty")
    for e in list(replay_queue) + list(current_queue):
        _check_unit_interval("queue prediction", e.probs.data)
    R, r_lab = _stack(replay_queue)
    D, d_lab = _stack(current_queue)
    if R.shape[1] != D.shape[1]:
        raise ShapeError("tac_loss", R.shape, D.shape)

    def sim(A, U):
        if similarity == "tversky":
            return pairwise_tversky(A, U, params)
        if similarity == "cosine":
            return pairwise_cosine(A, U, params.epsilon)
        raise ValueError(f"unknown similarity {similarity!r}")

    pos_rd, neg_rd = _pair_masks(replay_queue, r_lab, current_queue, d_lab)
    pos_dr, neg_dr = _pair_masks(current_queue, d_lab, replay_queue, r_lab)

    if per_entry:
        loss_d, valid_d = contrastive_from_similarity(sim(D, R), pos_dr, neg_dr, tau, per_anchor=True)
        out = {}
        ent = np.array([i for i, _ in d_lab])
        for i in range(len(current_queue)):
            sel = (ent == i) & valid_d
            out[i] = float(loss_d.data[sel, 0].mean()) if sel.any() else 0.0
        return out

    loss_r, valid_r = contrastive_from_similarity(sim(R, D), pos_rd, neg_rd, tau, per_anchor=True)
    loss_d, valid_d = contrastive_from_similarity(sim(D, R), pos_dr, neg_dr, tau, per_anchor=True)
    n_valid = int(valid_r.sum() + valid_d.sum())
    if n_valid == 0:
        warnings.warn("TAC bank has no anchor with a valid positive; loss set to 0", RuntimeWarning)
        return TacResult(Tensor(0.0), True, 0)
    total = T.add(T.sum(loss_r), T.sum(loss_d))
    return TacResult(T.mul_scalar(total, 1.0 / n_valid), False, n_valid)
