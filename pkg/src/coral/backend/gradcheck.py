"""Central finite-difference verification of analytic gradients.

Runs on a float64 copy of the parameters so the comparison is limited by
the O(h^2) truncation error of the difference, not float32 noise.
"""

from __future__ import annotations

import numpy as np

from .optim import ParameterStore


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|); entries where both are below
    `floor` count as exact (zero-gradient coordinates)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.where(denom > floor, denom, 1.0)
    err = np.where(denom > floor, err, 0.0)
    return float(err.max()) if err.size else 0.0


def finite_difference_check(
    build_loss,
    params: ParameterStore,
    n_coords: int = 200,
    h: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward() gradients against central differences.

    build_loss(params) must return a scalar Tensor and be deterministic.
    Checks up to n_coords randomly chosen parameter coordinates and returns
    the max relative error over them.
    """
    rng = rng or np.random.default_rng(0)
    params64 = params.astype(np.float64)

    params64.zero_grads()
    loss = build_loss(params64)
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params64.items()}

    coords = []
    for name, p in params64.items():
        for flat_idx in range(p.data.size):
            coords.append((name, flat_idx))
    if len(coords) > n_coords:
        chosen = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in chosen]

    worst = 0.0
    for name, flat_idx in coords:
        p = params64[name]
        flat = p.data.reshape(-1)
        original = flat[flat_idx]
        flat[flat_idx] = original + h
        up = build_loss(params64).item()
        flat[flat_idx] = original - h
        down = build_loss(params64).item()
        flat[flat_idx] = original
        numeric = (up - down) / (2.0 * h)
        analytic = grads[name].reshape(-1)[flat_idx]
        worst = max(worst, max_relative_error(np.array(analytic), np.array(numeric)))
    return worst
