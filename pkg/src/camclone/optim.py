"""Adam optimizer and a finite-difference gradient checker."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, backward

__all__ = ["Adam", "grad_check"]


class Adam:
    """Adam with bias correction.  Updates only trainable parameters; frozen
    ones are never touched (bitwise, not just numerically)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self, tape: Tape) -> None:
        """Apply one update from the gradients recorded on ``tape``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = tape.param_grad(p).astype(p.value.dtype, copy=False)
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar-valued ``fn`` against central
    finite differences in float64.  Returns the largest relative error over
    every element of every input.

    ``fn`` must be pure: it receives one tensor per input array and returns a
    scalar tensor.  Relative error uses max(|analytic|, |numeric|, 1) in the
    denominator so near-zero gradients are compared absolutely.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    loss = fn(*leaves)
    backward(loss)
    analytic = [tape.grad(leaf) for leaf in leaves]

    def eval_at(arrays) -> float:
        out = fn(*[Tensor(a) for a in arrays])
        return float(out.data)

    worst = 0.0
    for i, x in enumerate(xs):
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nf = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            work = [a.copy() for a in xs]
            wf = work[i].reshape(-1)
            wf[j] = orig + h
            up = eval_at(work)
            wf[j] = orig - h
            down = eval_at(work)
            nf[j] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(num)), 1.0)
        rel = np.abs(analytic[i] - num) / denom
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
