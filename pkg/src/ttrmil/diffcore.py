"""Reverse-mode differentiation core on dense 2-d float64 tensors.

This is a deliberately small tape, not a general autodiff system: the two
model heads and the survival loss only ever need the primitives below, and
keeping the set explicit makes every backward rule individually checkable
against central finite differences (see `grad_check`).

Conventions
-----------
* Every tensor is a `Tensor2`: row-major, 2-d, float64.  Vectors travel as
  single-column or single-row matrices.
* Every primitive takes `tape=None`.  With a `GradTape` it records a backward
  closure; without one it is a plain forward evaluation (inference).
* Gradients accumulate into `Tensor2.grad`.  One forward pass per tape, one
  `backward` call per tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteError

__all__ = [
    "Tensor2",
    "GradTape",
    "zero_grads",
    "linear",
    "tanh_ew",
    "sigmoid_ew",
    "mul_ew",
    "add",
    "scale",
    "softmax_subset",
    "dropout",
    "weighted_sum",
    "select_rows",
    "concat_rows",
    "log_sum_exp",
    "cross_entropy",
    "AdamState",
    "adam_step",
    "Adam",
    "GradCheckReport",
    "grad_check",
]


class Tensor2:
    """Dense 2-d float64 tensor with a lazily allocated gradient buffer.

    Construction validates the two invariants every op relies on: the array
    is exactly 2-d (rows x cols) and every entry is finite.  NaN/Inf is an
    error state, never a value.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatch(f"Tensor2 requires a 2-d array, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor2":
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor2":
        return Tensor2(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.data.shape})"


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _accum(t: Tensor2, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class GradTape:
    """Records backward closures in execution order.

    `backward(loss)` seeds d(loss)/d(loss) = 1 on a 1x1 loss node and replays
    the closures in reverse.  Each registered parameter ends the pass with its
    full gradient accumulated exactly once; nodes off the path to the loss are
    skipped (their output grad stays None).
    """

    def __init__(self):
        self._steps = []
        self._consumed = False

    def record(self, step) -> None:
        self._steps.append(step)

    def backward(self, loss: Tensor2) -> None:
        if self._consumed:
            raise RuntimeError("tape already replayed; build a fresh tape per forward pass")
        if loss.shape != (1, 1):
            raise DimensionMismatch(f"loss must be 1x1, got {loss.shape}")
        self._consumed = True
        loss.grad = np.ones((1, 1))
        for step in reversed(self._steps):
            step()


def linear(x: Tensor2, w: Tensor2, b: Tensor2 | None = None, tape: GradTape | None = None) -> Tensor2:
    """x @ w (+ b): (n,d) @ (d,k) -> (n,k).  b, when given, is a (1,k) row."""
    if x.cols != w.rows:
        raise DimensionMismatch(f"linear: x is {x.shape}, w is {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        if b.shape != (1, w.cols):
            raise DimensionMismatch(f"linear: bias must be (1,{w.cols}), got {b.shape}")
        out_data = out_data + b.data
    out = Tensor2(out_data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            if b is not None:
                _accum(b, g.sum(axis=0, keepdims=True))
        tape.record(backward)
    return out


def tanh_ew(x: Tensor2, tape: GradTape | None = None) -> Tensor2:
    out = Tensor2(np.tanh(x.data))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * (1.0 - out.data * out.data))
        tape.record(backward)
    return out


def sigmoid_ew(x: Tensor2, tape: GradTape | None = None) -> Tensor2:
    # exp of a non-positive argument on both branches keeps this overflow-free
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor2(out_data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * out.data * (1.0 - out.data))
        tape.record(backward)
    return out


def mul_ew(a: Tensor2, b: Tensor2, tape: GradTape | None = None) -> Tensor2:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mul_ew: {a.shape} vs {b.shape}")
    out = Tensor2(a.data * b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        tape.record(backward)
    return out


def add(a: Tensor2, b: Tensor2, tape: GradTape | None = None) -> Tensor2:
    if a.shape != b.shape:
        raise DimensionMismatch(f"add: {a.shape} vs {b.shape}")
    out = Tensor2(a.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            _accum(b, g)
        tape.record(backward)
    return out


def scale(x: Tensor2, c: float, tape: GradTape | None = None) -> Tensor2:
    out = Tensor2(x.data * float(c))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * float(c))
        tape.record(backward)
    return out


def softmax_subset(scores: Tensor2, subset, tape: GradTape | None = None) -> Tensor2:
    """Max-shifted softmax over `scores[subset]` of an (n,1) score column.

    Returns an (m,1) column aligned with `subset` order.  Rows outside the
    subset get neither probability mass nor gradient.
    """
    if scores.cols != 1:
        raise DimensionMismatch(f"softmax_subset expects an (n,1) column, got {scores.shape}")
    idx = np.asarray(subset, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("softmax_subset: empty subset")
    if idx.min() < 0 or idx.max() >= scores.rows:
        raise IndexError(f"softmax_subset: subset out of range for {scores.rows} rows")
    if np.unique(idx).size != idx.size:
        raise ValueError("softmax_subset: subset indices must be unique")
    z = scores.data[idx, 0]
    e = np.exp(z - z.max())
    p = e / e.sum()
    out = Tensor2(p[:, None])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            gv = g[:, 0]
            ds = p * (gv - float(p @ gv))
            full = np.zeros_like(scores.data)
            full[idx, 0] = ds
            _accum(scores, full)
        tape.record(backward)
    return out


def dropout(x: Tensor2, rate: float, rng: np.random.Generator | None = None,
            training: bool = False, tape: GradTape | None = None) -> Tensor2:
    """Inverted dropout: survivors scaled by 1/(1-rate) so inference is identity.

    With training=False or rate == 0 the input node is returned unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    out = Tensor2(x.data * keep)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, g * keep)
        tape.record(backward)
    return out


def weighted_sum(weights: Tensor2, x: Tensor2, tape: GradTape | None = None) -> Tensor2:
    """Convex-style pooling: (k,1) weights against (k,d) rows -> (1,d)."""
    if weights.cols != 1 or weights.rows != x.rows:
        raise DimensionMismatch(f"weighted_sum: weights {weights.shape} vs rows {x.shape}")
    out = Tensor2(weights.data.T @ x.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(weights, x.data @ g.T)
            _accum(x, weights.data @ g)
        tape.record(backward)
    return out


def select_rows(x: Tensor2, idx, tape: GradTape | None = None) -> Tensor2:
    """Gather rows; backward scatters (duplicate indices accumulate)."""
    ii = np.asarray(idx, dtype=np.intp).ravel()
    if ii.size == 0:
        raise ValueError("select_rows: empty index list")
    if ii.min() < 0 or ii.max() >= x.rows:
        raise IndexError(f"select_rows: index out of range for {x.rows} rows")
    out = Tensor2(x.data[ii])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            acc = np.zeros_like(x.data)
            np.add.at(acc, ii, g)
            _accum(x, acc)
        tape.record(backward)
    return out


def concat_rows(parts: list[Tensor2], tape: GradTape | None = None) -> Tensor2:
    """Stack tensors with equal column counts along rows."""
    if not parts:
        raise ValueError("concat_rows: nothing to concatenate")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionMismatch("concat_rows: column counts differ")
    out = Tensor2(np.concatenate([p.data for p in parts], axis=0))
    if tape is not None:
        offsets = np.cumsum([0] + [p.rows for p in parts])

        def backward():
            g = out.grad
            if g is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, g[lo:hi])
        tape.record(backward)
    return out


def log_sum_exp(x: Tensor2, tape: GradTape | None = None) -> Tensor2:
    """Max-shifted log-sum-exp of an (n,1) column -> (1,1)."""
    if x.cols != 1:
        raise DimensionMismatch(f"log_sum_exp expects an (n,1) column, got {x.shape}")
    z = x.data[:, 0]
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    out = Tensor2([[m + np.log(s)]])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accum(x, (e / s)[:, None] * g[0, 0])
        tape.record(backward)
    return out


def cross_entropy(logits: Tensor2, labels, tape: GradTape | None = None) -> Tensor2:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (m, C); labels: m integers in [0, C). Returns a (1,1) scalar.
    """
    y = np.asarray(labels, dtype=np.intp).ravel()
    if y.size != logits.rows:
        raise DimensionMismatch(f"cross_entropy: {logits.rows} rows vs {y.size} labels")
    if y.size and (y.min() < 0 or y.max() >= logits.cols):
        raise ValueError("cross_entropy: label outside class range")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    log_probs = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    n = y.size
    out = Tensor2([[-log_probs[np.arange(n), y].mean()]])
    if tape is not None:
        probs = np.exp(log_probs)

        def backward():
            g = out.grad
            if g is None:
                return
            d = probs.copy()
            d[np.arange(n), y] -= 1.0
            _accum(logits, d * (g[0, 0] / n))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter tensor."""

    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params: list[Tensor2]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor2], grads: list[np.ndarray], state: AdamState,
              lr: float, weight_decay: float, t: int) -> None:
    """One bias-corrected Adam step, t counting from 1.

    Weight decay is decoupled: each parameter is first shrunk in place by
    (1 - lr * weight_decay), then the Adam update is applied from the raw
    gradient.  Decay therefore never enters the moment buffers.
    """
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionMismatch("adam_step: params/grads/state lengths differ")
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


class Adam:
    """Stateful wrapper used by the training loops; reads grads off the tensors."""

    def __init__(self, params: list[Tensor2], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.state = AdamState.for_params(self.params)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay, self.t)

    def zero_grad(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    passed: bool
    max_rel_err: float
    n_checked: int
    n_failed: int
    failures: list[tuple[int, int, int, float]] = field(default_factory=list)
    # failures hold (param_index, row, col, rel_err), worst first, capped at 20

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: {self.n_checked} coords, "
                f"max rel err {self.max_rel_err:.3e}, {self.n_failed} over tol")


def grad_check(loss_fn, params: list[Tensor2], eps: float = 1e-5,
               tol: float = 1e-5) -> GradCheckReport:
    """Check d loss_fn / d params against central finite differences.

    loss_fn(tape) must rebuild the forward pass from the current parameter
    values on the given tape (tape=None for the perturbed evaluations) and
    return a 1x1 loss tensor.  It has to be deterministic: any stochastic op
    inside must draw from a freshly seeded rng on every call.

    A coordinate fails when |fd - analytic| / max(1, |fd|, |analytic|) > tol.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    zero_grads(params)
    tape = GradTape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    failures = []
    max_rel = 0.0
    n_checked = 0
    for pi, p in enumerate(params):
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            r, c = it.multi_index
            orig = p.data[r, c]
            p.data[r, c] = orig + eps
            up = float(loss_fn(None).data[0, 0])
            p.data[r, c] = orig - eps
            down = float(loss_fn(None).data[0, 0])
            p.data[r, c] = orig
            fd = (up - down) / (2.0 * eps)
            an = analytic[pi][r, c]
            rel = abs(fd - an) / max(1.0, abs(fd), abs(an))
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel > tol:
                failures.append((pi, r, c, rel))
            it.iternext()

    failures.sort(key=lambda f: -f[3])
    return GradCheckReport(passed=not failures, max_rel_err=max_rel,
                           n_checked=n_checked, n_failed=len(failures),
                           failures=failures[:20])
