"""Finite-difference gradient verification.

The oracle is the central difference (f(x+h) - f(x-h)) / 2h evaluated in
float64 with h=1e-4: truncation and roundoff both land far below the 1e-4
acceptance threshold, so a failing check means a wrong backward rule, not
oracle noise.

`grad_check` perturbs every element of every input: exhaustive, for the
individual primitives. `directional_grad_check` compares <grad, v> against
the derivative along random unit directions v, which covers end-to-end
models whose parameter count makes exhaustive probing too slow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, mul, sum_all


def relative_error(analytic, numeric):
    """max |a-n| / max(|a|+|n|, 1): symmetric-relative for O(1) gradients,
    absolute for tiny ones so near-zero gradients don't blow up the ratio."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    per_input: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


def _projected_scalar(fn, inputs, proj):
    out = fn(*inputs)
    return sum_all(mul(out, proj))


def grad_check(fn, input_shapes, tolerance=1e-4, seed=0, step=1e-4):
    """Exhaustive element-wise check of `fn`'s analytic gradients.

    `fn` maps positional Tensors to one output Tensor; the output is reduced
    to a scalar through a fixed random projection so every output element
    carries weight. Returns a :class:`GradCheckReport`.
    """
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True, dtype=np.float64)
              for s in input_shapes]
    with Tape() as tape:
        probe = fn(*inputs)
        proj = Tensor(rng.standard_normal(probe.shape), dtype=np.float64)
        loss = sum_all(mul(probe, proj))
        tape.backward(loss, params=inputs)
    analytic = [t.grad.copy() for t in inputs]

    per_input = []
    for t, ga in zip(inputs, analytic):
        gn = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = gn.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = _projected_scalar(fn, inputs, proj).item()
            flat[j] = orig - step
            lo = _projected_scalar(fn, inputs, proj).item()
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        per_input.append(relative_error(ga, gn))

    return GradCheckReport(max_rel_err=max(per_input), tolerance=tolerance,
                           per_input=per_input)


def directional_grad_check(loss_fn, params, n_directions=6, seed=0,
                           tolerance=1e-4, step=1e-4):
    """Check d(loss)/d(params) along random directions.

    `loss_fn()` must recompute the scalar loss from the *current* values of
    `params` (float64 tensors). One taped backward gives the analytic
    gradient; every direction then costs two forward evaluations.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss, params=params)
    grads = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_directions):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        for p, d in zip(params, dirs):
            p.data += step * d
        hi = loss_fn().item()
        for p, d in zip(params, dirs):
            p.data -= 2.0 * step * d
        lo = loss_fn().item()
        for p, d in zip(params, dirs):
            p.data += step * d
        numeric = (hi - lo) / (2.0 * step)
        worst = max(worst, relative_error([analytic], [numeric]))

    return GradCheckReport(max_rel_err=worst, tolerance=tolerance)
