"""Central finite-difference verification harness.

Used by the unit tests and by the ``gradcheck`` CLI command: run a scalar
forward function twice per perturbed coordinate and compare the quotient
against the analytic gradient accumulated by a backward pass.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Tape, TapeTensor

REL_TOL = 1e-4
FD_STEP = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference(
    forward: Callable[[], float],
    tensor: TapeTensor,
    coords: Sequence[tuple] | None = None,
    h: float = FD_STEP,
) -> tuple[np.ndarray, list[tuple]]:
    """Central differences of ``forward()`` w.r.t. entries of ``tensor``.

    ``coords`` selects flat indices to probe (all entries when None). Returns
    the numeric gradients and the probed flat indices.
    """
    flat = tensor.data.reshape(-1)
    if coords is None:
        idxs = list(range(flat.size))
    else:
        idxs = list(coords)
    grads = np.empty(len(idxs), dtype=np.float64)
    for k, i in enumerate(idxs):
        old = flat[i]
        flat[i] = old + h
        fp = forward()
        flat[i] = old - h
        fm = forward()
        flat[i] = old
        grads[k] = (fp - fm) / (2.0 * h)
    return grads, idxs


def check_gradients(
    build_loss: Callable[[], TapeTensor],
    params: Sequence[TapeTensor],
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    h: float = FD_STEP,
) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``build_loss`` must construct the scalar loss from the current parameter
    values (it is re-invoked for every finite-difference evaluation).
    ``sample`` limits the probed coordinates per parameter tensor.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)

    def forward() -> float:
        return build_loss().item()

    worst = 0.0
    for p in params:
        if p.grad is None:
            analytic_full = np.zeros(p.size)
        else:
            analytic_full = p.grad.reshape(-1)
        if sample is not None and p.size > sample:
            r = rng or np.random.default_rng(0)
            coords = r.choice(p.size, size=sample, replace=False)
        else:
            coords = None
        numeric, idxs = finite_difference(forward, p, coords=coords, h=h)
        analytic = analytic_full[np.asarray(idxs, dtype=np.intp)]
        worst = max(worst, rel_error(np.asarray(analytic), numeric))
    return worst
