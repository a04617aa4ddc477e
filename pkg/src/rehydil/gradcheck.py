"""Central finite-difference checks against the autodiff tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int
    errors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_difference_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare autodiff gradients of a scalar function with central differences.

    ``x`` is a single tensor (then ``f`` receives it as its argument) or a
    collection of leaf tensors that ``f`` closes over (then ``f`` is called
    with no arguments).  ``max_elements`` samples a random subset of entries
    per tensor to keep large parameter sets affordable.
    """
    single = isinstance(x, Tensor)
    if single:
        named = {"x": x}
        call = lambda: f(x)  # noqa: E731
    elif isinstance(x, dict):
        named = dict(x)
        call = f
    else:
        named = {str(i): t for i, t in enumerate(x)}
        call = f

    for t in named.values():
        t.requires_grad = True
        t.grad = None
    out = call()
    if out.size != 1:
        raise ShapeError("finite_difference_check", out.shape, detail="function must be scalar-valued")
    out.backward()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    checked = 0
    errors: dict[str, np.ndarray] = {}
    for name, t in named.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = call().item()
            flat[i] = orig - h
            fm = call().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * h)
        err = relative_error(analytic.reshape(-1)[idx], numeric, floor)
        errors[name] = err
        checked += idx.size
        if err.size:
            worst = max(worst, float(err.max()))
    return GradcheckReport(max_rel_error=worst, tol=tol, checked=checked, errors=errors)
