"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from msgl.autograd.tensor import Tensor, no_grad

DEFAULT_STEP = 1e-5

# The finite-difference side is evaluated in extended precision where the
# platform provides it. Some gradients are structurally zero (an attention
# key bias shifts every score of a query equally), so a float64 difference
# quotient there is pure rounding noise of order eps*|f|/h, which exceeds the
# 1e-8 floor of the relative error for any step small enough to keep the
# truncation error of the other coordinates negligible.
ORACLE_DTYPE = np.longdouble


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _central_difference(
    f: Callable[[], Tensor], leaf: Tensor, h: float, dtype=ORACLE_DTYPE
) -> np.ndarray:
    base = leaf.data
    flat = base.reshape(-1).astype(dtype)
    numeric = np.empty(base.size)
    with no_grad():
        try:
            for i in range(base.size):
                bumped = flat.copy()
                bumped[i] += h
                leaf.data = bumped.reshape(base.shape)
                up = f().data.sum()
                bumped[i] = flat[i] - h
                leaf.data = bumped.reshape(base.shape)
                down = f().data.sum()
                numeric[i] = float((up - down) / (2.0 * h))
        finally:
            leaf.data = base
    return numeric.reshape(base.shape)


def _central_difference_lanes(
    f: Callable[[], Tensor], leaf: Tensor, h: float, lanes: int, lane_rank: int,
    dtype=ORACLE_DTYPE,
) -> np.ndarray:
    """Evaluate up to ``lanes`` perturbed copies of ``leaf`` per forward pass.

    The copies are stacked on a new leading axis and the tensor is padded
    with singleton axes to rank ``lane_rank``, so broadcasting carries the
    copies through ``f`` as an extra batch axis. ``f`` must reduce only over
    its trailing axes and return one value per copy.
    """
    base = leaf.data
    n = base.size
    pad = (1,) * max(lane_rank - 1 - base.ndim, 0)
    numeric = np.empty(n)
    with no_grad():
        try:
            for start in range(0, n, lanes):
                idx = np.arange(start, min(start + lanes, n))
                k = len(idx)
                stack = np.broadcast_to(base.reshape(-1).astype(dtype), (k, n)).copy()
                vals = []
                for sign in (1.0, -1.0):
                    bumped = stack.copy()
                    bumped[np.arange(k), idx] += sign * h
                    leaf.data = bumped.reshape((k,) + pad + base.shape)
                    vals.append(np.asarray(f().data).reshape(k, -1).sum(axis=1))
                numeric[idx] = ((vals[0] - vals[1]) / (2.0 * h)).astype(np.float64)
        finally:
            leaf.data = base
    return numeric.reshape(base.shape)


def check_gradients(
    f: Callable[[Tensor], Tensor], x, h: float = DEFAULT_STEP, dtype=ORACLE_DTYPE
) -> float:
    """Largest relative gap between the tape gradient of ``f`` at ``x`` and a
    central difference with step ``h``.

    The error for coordinate i is |a - n| / max(|a|, |n|, 1e-8).
    """
    leaf = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = _central_difference(lambda: f(leaf), leaf, h, dtype)
    return float(relative_error(analytic, numeric).max(initial=0.0))


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    lanes: Optional[int] = None,
    lane_rank: int = 4,
    dtype=ORACLE_DTYPE,
) -> dict[str, float]:
    """Per-parameter maximum relative error for a closure over ``params``.

    With ``lanes`` set, perturbed copies are evaluated in batches (see
    :func:`_central_difference_lanes`); ``loss_fn`` must then keep any
    leading axes it receives and reduce only trailing ones.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        loss = loss.sum()
    loss.backward()
    analytic = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
        for name, p in params.items()
    }
    errors = {}
    for name, p in params.items():
        if lanes:
            numeric = _central_difference_lanes(loss_fn, p, h, lanes, lane_rank, dtype)
        else:
            numeric = _central_difference(loss_fn, p, h, dtype)
        errors[name] = float(relative_error(analytic[name], numeric).max(initial=0.0))
        p.zero_grad()
    return errors
