"""Tversky index, the two segmentation losses, and the contrastive term on a few masks.

    python demos/loss_walkthrough.py
"""
import numpy as np

from rehydil.losses import (PredictionEntry, TverskyParams, focal_tversky_loss, tac_loss,
                            tversky_dice_loss, tversky_similarity)
from rehydil.tensor import Tensor

g = np.array([1.0, 1, 0, 0])
u = np.array([1.0, 0, 1, 0])
for a, b in [(0.5, 0.5), (0.7, 1.5), (0.6, 1.6)]:
    s = tversky_similarity(g, u, TverskyParams(a, b)).item()
    print(f"alpha={a} beta={b}: S = {s:.4f}")

rng = np.random.default_rng(1)
target = (rng.uniform(size=(2, 3, 8, 8)) > 0.6).astype(float)
pred = Tensor(np.clip(target * 0.8 + rng.uniform(0, 0.3, size=target.shape), 0, 1), requires_grad=True)
print("L_DT = %.4f" % tversky_dice_loss(pred, target).item())
print("L_FT = %.4f" % focal_tversky_loss(pred, target, gamma=1.2).item())

# replay queue from an older model, current queue from the model being trained
replay = [PredictionEntry(Tensor(rng.uniform(size=(3, 8, 8))), p, "T1", "previous_stage") for p in "AB"]
current = [PredictionEntry(Tensor(rng.uniform(size=(3, 8, 8)), requires_grad=True), p, "T2", "current_stage")
           for p in "BC"]
res = tac_loss(replay, current, tau=0.7)
res.loss.backward()
print("TAC = %.4f over %d anchors, degenerate=%s" % (res.loss.item(), res.anchors, res.degenerate))
print("replay maps get no gradient:", all(e.probs.grad is None for e in replay))
