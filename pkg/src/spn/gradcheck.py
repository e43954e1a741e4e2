"""Finite-difference gradient verification.

Only meaningful in float64: float32 rounding noise swamps central
differences, so callers must build the model under test at 64-bit.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag

_DENOM_FLOOR = 1e-8


def _eval(f) -> float:
    with ag.no_grad():
        out = f()
    return out.item() if isinstance(out, ag.Tensor) else float(out)


def _analytic_grads(f, params):
    ag.zero_grads([("", p) for p in params])
    loss = f()
    ag.backward(loss)
    return [np.zeros(p.shape, dtype=p.dtype) if p.grad is None else p.grad for p in params]


def check_gradients(f, params, h=1e-5, mode="exact", n_directions=5, rng=None) -> float:
    """Max relative error between taped and central-difference gradients.

    f: zero-argument callable rebuilding the scalar loss from `params`.
    mode "exact" probes every coordinate; "directional" probes random unit
    directions through all parameters at once (for large models). Relative
    error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    params = [p for p in params]
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient checking requires float64 parameters")
    grads = _analytic_grads(f, params)
    worst = 0.0

    if mode == "exact":
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _eval(f)
                flat[i] = orig - h
                fm = _eval(f)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), _DENOM_FLOOR)
                worst = max(worst, err)
    elif mode == "directional":
        rng = rng or np.random.default_rng(0)
        for _ in range(n_directions):
            dirs = [rng.standard_normal(p.shape) for p in params]
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            for p, d in zip(params, dirs):
                p.data += h * d
            fp = _eval(f)
            for p, d in zip(params, dirs):
                p.data -= 2.0 * h * d
            fm = _eval(f)
            for p, d in zip(params, dirs):
                p.data += h * d
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic - num) / max(abs(analytic), abs(num), _DENOM_FLOOR)
            worst = max(worst, err)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return worst
