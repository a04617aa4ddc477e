"""The packaged finite-difference suite run by ``rehydil gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .chsnet import CHSNet, ModelConfig
from .gradcheck import GradcheckReport, finite_difference_check
from .hypergraph import build_hypergraph, hgnn_propagate
from .losses import PredictionEntry, focal_tversky_loss, intra_loss, tac_loss, tversky_dice_loss
from .tensor import Tensor


@dataclass
class SuiteResult:
    check: str
    seed: int
    report: GradcheckReport


def _dice(seed: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4, 4)))
    t = (rng.uniform(size=p.shape) > 0.5).astype(float)
    return finite_difference_check(lambda: tversky_dice_loss(p, t), [p])


def _focal(seed: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 4, 4)))
    t = (rng.uniform(size=p.shape) > 0.5).astype(float)
    return finite_difference_check(lambda: focal_tversky_loss(p, t, gamma=1.2), [p])


def _tac(seed: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    replay = [PredictionEntry(Tensor(rng.uniform(0.1, 0.9, size=(2, 2, 2))), pid, "T1", "previous_stage")
              for pid in "AB"]
    current = [PredictionEntry(Tensor(rng.uniform(0.1, 0.9, size=(2, 2, 2))), pid, "T2", "current_stage")
               for pid in "BC"]
    return finite_difference_check(lambda: tac_loss(replay, current, tau=0.7).loss, [e.probs for e in current])


def _hgnn(seed: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    V = Tensor(rng.normal(size=(6, 3)))
    w = Tensor(rng.uniform(0.5, 1.5, size=6))
    target = Tensor(rng.normal(size=(6, 3)))
    g = build_hypergraph(V.data)
    return finite_difference_check(lambda: T.sum(T.mul(hgnn_propagate(g, V, w), target)), [V, w])


def _tiny_net(seed: int) -> GradcheckReport:
    # depth 3 on 8x8 inputs; the hypergraphs are pinned so the loss is smooth in the weights
    model = CHSNet(ModelConfig(depth=3, base_channels=2, image_size=8, cph_stages=(2, 3), seed=seed))
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if not name.endswith("edge_w"):
            p.data += rng.normal(0, 0.1, size=p.shape)
    x = Tensor(rng.uniform(size=(3, 4, 8, 8)))
    target = (rng.uniform(size=(3, 3, 8, 8)) > 0.5).astype(float)
    _, graphs = model.forward(x, return_graphs=True)
    return finite_difference_check(lambda: intra_loss(model.forward(x, graphs=graphs), target),
                                   dict(model.named_parameters()), max_elements=4, rng=rng)


CHECKS: dict[str, Callable[[int], GradcheckReport]] = {
    "tversky_dice": _dice,
    "focal_tversky": _focal,
    "tac": _tac,
    "hgnn": _hgnn,
    "tiny_chsnet": _tiny_net,
}


def run_suite(seeds: int = 20, checks=None) -> Iterator[SuiteResult]:
    for name in checks or CHECKS:
        for seed in range(seeds):
            yield SuiteResult(name, seed, CHECKS[name](seed))
