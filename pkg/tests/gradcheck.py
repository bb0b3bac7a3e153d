"""Central finite-difference checks for the tape engine (double precision)."""

from __future__ import annotations

import numpy as np

from aresgaze import ops
from aresgaze.tensor import Tape, Tensor

EPS = 1e-3
TOL = 1e-4
NET_EPS = 1e-5  # whole networks: O(eps^2) truncation through small-batch BN swamps 1e-4 at eps=1e-3
ROUNDOFF_ULPS = 1024  # forward round-off; measured at a few hundred ulps through batch norm on batches of 2
PIECEWISE_OPS = ("relu", "max_pool2d")


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe ``sum(out * weights)`` so every output element matters."""
    return ops.sum_all(ops.mul(out, weights))


def rel_err(a, b, floor: float = 0.0) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the Euclidean norm over a tensor's probes."""
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor, 1e-300))


def _branch_pattern(tape: Tape) -> list[np.ndarray]:
    """Active pieces of every piecewise-linear op on the tape (relu masks, max-pool winners)."""
    return [node.grad_fn(np.ones_like(node.output.data))[0] for node in tape.nodes if node.op in PIECEWISE_OPS]


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(loss_fn, tensors: list[Tensor], rng: np.random.Generator, coords: int = 4,
                    directions: int = 1, eps: float = EPS, report: dict | None = None) -> float:
    """Largest relative error between analytic and central-difference derivatives.

    For every tensor: ``directions`` derivatives along random unit directions
    over the whole tensor plus ``coords`` single-coordinate derivatives, at
    step ``eps``; the tensor's error compares the analytic and numeric probe
    vectors. A difference quotient cannot resolve derivatives smaller than its
    own round-off (``ROUNDOFF_ULPS`` ulps of the loss over the step), so such
    derivatives, e.g. a conv bias feeding batch norm, are held to absolute
    agreement within that resolution instead. A difference quotient is also
    only meaningful on a smooth stencil: if the +/-step forwards switch any
    relu or max-pool branch relative to the unperturbed forward, the step is
    divided by 10 (down to 1e-7) until they don't. ``report`` (if given) receives probe counts and the smallest step.
    ``loss_fn()`` must rebuild the scalar loss from the current tensor values.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradient checks run in double precision"
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, tensors)
    base = _branch_pattern(tape)

    def value(t: Tensor, data: np.ndarray):
        t.data = data
        with Tape() as probe_tape:
            v = float(loss_fn().data)
        return v, _branch_pattern(probe_tape)

    stats = {"probes": 0, "reduced_step": 0, "min_step": eps}
    worst = 0.0
    for t, g in zip(tensors, grads):
        analytic, numeric, noise = [], [], 0.0
        for k in range(directions + min(coords, t.size)):
            if k < directions:
                d = rng.standard_normal(t.shape)
                d /= np.linalg.norm(d)
            else:
                d = np.zeros(t.shape)
                d.flat[rng.integers(t.size)] = 1.0
            orig = t.data.copy()
            step = eps
            while True:
                up, pat_up = value(t, orig + step * d)
                down, pat_down = value(t, orig - step * d)
                t.data = orig
                if (_same_pattern(base, pat_up) and _same_pattern(base, pat_down)) or step <= 1e-7:
                    break
                step /= 10
            noise = max(noise, ROUNDOFF_ULPS * np.spacing(max(abs(up), abs(down))) / step)
            analytic.append(float(np.sum(g * d)))
            numeric.append((up - down) / (2 * step))
            stats["probes"] += 1
            stats["reduced_step"] += step < eps
            stats["min_step"] = min(stats["min_step"], step)
        err = rel_err(np.array(analytic), np.array(numeric), noise / TOL)
        if err > worst:
            worst = err
            stats["worst_tensor"] = t.name or str(t.shape)
    if report is not None:
        report.update(stats)
    return worst
