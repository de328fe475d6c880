"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records primitive operations as they execute; :meth:`Tape.backward`
replays the record in reverse to accumulate gradients of a scalar root with
respect to every node.  The primitive set is intentionally small: dense matmul,
elementwise arithmetic, the activations used by the networks in this package,
grouped sum-pooling, and an MSE loss.  Broadcasting is restricted to
scalar-times-tensor and bias-add; anything else must be reshaped explicitly.

All values are float64.  Reductions use numpy's deterministic accumulation, so
replaying a tape on identical inputs is bit-identical.  Non-finite outputs are
rejected at op boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's arity/broadcast rule."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. non-scalar backward root)."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Tensor:
    """Handle to a node on a tape.  Immutable once created."""

    tape: "Tape"
    node_id: int
    shape: tuple

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self)


@dataclass
class _Node:
    kind: str
    parents: tuple
    value: np.ndarray
    payload: dict = field(default_factory=dict)


class Tape:
    """Single-owner op recorder.  Not shareable while recording.

    ``backward`` does not mutate the tape, so a tape may be differentiated
    several times (e.g. once per output head).
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # -- node plumbing ----------------------------------------------------

    def _record(self, kind, parents, value, payload=None) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"op '{kind}' produced a non-finite value")
        self._nodes.append(_Node(kind, tuple(p.node_id for p in parents),
                                 value, payload or {}))
        return Tensor(self, len(self._nodes) - 1, value.shape)

    def value(self, t: Tensor) -> np.ndarray:
        return self._nodes[t.node_id].value

    def leaf(self, value) -> Tensor:
        """Register an input node.  Gradients are reported for leaves."""
        return self._record("leaf", (), _as_array(value))

    # -- primitives --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        return self._record("matmul", (a, b), av @ bv)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.value, b.value
        if av.shape != bv.shape and not (bv.shape == (1, av.shape[1])):
            raise ShapeError(f"add: {av.shape} + {bv.shape} (bias-add needs (1, n))")
        return self._record("add", (a, b), av + bv)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.scale(b, -1.0))

    def hadamard(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"hadamard: {a.value.shape} * {b.value.shape}")
        return self._record("hadamard", (a, b), a.value * b.value)

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._record("scale", (a,), float(c) * a.value, {"c": float(c)})

    def shift(self, a: Tensor, c: float) -> Tensor:
        """Add a scalar constant elementwise."""
        return self._record("shift", (a,), a.value + float(c))

    def sigmoid(self, a: Tensor) -> Tensor:
        v = a.value
        out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                       np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        return self._record("sigmoid", (a,), out)

    def tanh(self, a: Tensor) -> Tensor:
        return self._record("tanh", (a,), np.tanh(a.value))

    def relu(self, a: Tensor) -> Tensor:
        return self._record("relu", (a,), np.maximum(a.value, 0.0))

    def square(self, a: Tensor) -> Tensor:
        return self._record("square", (a,), a.value * a.value)

    def smooth_hinge(self, a: Tensor, width: float) -> Tensor:
        """One-sided hinge: 0 for t<=0, quadratic ramp of the given width, then affine.

        Exactly zero (value and derivative) at and below t=0.
        """
        if width <= 0:
            raise ShapeError("smooth_hinge width must be positive")
        out = smooth_hinge_value(a.value, width)
        return self._record("smooth_hinge", (a,), out, {"width": float(width)})

    def sum_pool(self, a: Tensor, group: int | None = None) -> Tensor:
        """Sum rows.  With ``group=g``, every consecutive block of g rows is
        summed, mapping (B*g, n) -> (B, n).  Without, all rows sum to (1, n)."""
        v = a.value
        if group is None:
            out = v.sum(axis=0, keepdims=True)
            return self._record("sum_pool", (a,), out, {"group": v.shape[0]})
        if v.shape[0] % group != 0:
            raise ShapeError(f"sum_pool: {v.shape[0]} rows not divisible by {group}")
        out = v.reshape(v.shape[0] // group, group, v.shape[1]).sum(axis=1)
        return self._record("sum_pool", (a,), out, {"group": int(group)})

    def total_sum(self, a: Tensor) -> Tensor:
        return self._record("total_sum", (a,), np.array([[a.value.sum()]]))

    def mean_all(self, a: Tensor) -> Tensor:
        return self.scale(self.total_sum(a), 1.0 / a.value.size)

    def mse(self, pred: Tensor, target: Tensor) -> Tensor:
        if pred.value.shape != target.value.shape:
            raise ShapeError(f"mse: {pred.value.shape} vs {target.value.shape}")
        d = pred.value - target.value
        return self._record("mse", (pred, target),
                            np.array([[np.mean(d * d)]]))

    def concat_cols(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape[0] != b.value.shape[0]:
            raise ShapeError(f"concat_cols: {a.value.shape} | {b.value.shape}")
        out = np.concatenate([a.value, b.value], axis=1)
        return self._record("concat_cols", (a, b), out,
                            {"split": a.value.shape[1]})

    def external(self, a: Tensor, value, vjp) -> Tensor:
        """Splice in a function computed outside the tape.

        ``value`` is f(a) evaluated externally; ``vjp(g)`` must return the
        vector-Jacobian product J(a)^T applied to the upstream gradient g.
        Used for piecewise-linear set projections whose a.e. Jacobians are
        known in closed form.
        """
        return self._record("external", (a,), _as_array(value), {"vjp": vjp})

    # -- reverse pass --------------------------------------------------------

    def backward(self, root: Tensor) -> dict:
        """Gradients of a scalar root w.r.t. every node, keyed by node id.

        The tape is left unchanged and may be differentiated again.
        """
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got {root.shape}")
        grads: dict[int, np.ndarray] = {root.node_id: np.ones((1, 1))}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            for pid, pg in zip(node.parents, self._vjp(node, g)):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        return grads

    def grad(self, root: Tensor, wrt: Tensor) -> np.ndarray:
        g = self.backward(root).get(wrt.node_id)
        return np.zeros(wrt.shape) if g is None else g

    def _vjp(self, node: _Node, g: np.ndarray):
        k = node.kind
        if k == "leaf":
            return ()
        if k == "matmul":
            av = self._nodes[node.parents[0]].value
            bv = self._nodes[node.parents[1]].value
            return (g @ bv.T, av.T @ g)
        if k == "add":
            bv = self._nodes[node.parents[1]].value
            gb = g if bv.shape == g.shape else g.sum(axis=0, keepdims=True)
            return (g, gb)
        if k == "hadamard":
            av = self._nodes[node.parents[0]].value
            bv = self._nodes[node.parents[1]].value
            return (g * bv, g * av)
        if k == "scale":
            return (node.payload["c"] * g,)
        if k == "shift":
            return (g,)
        if k == "sigmoid":
            y = node.value
            return (g * y * (1.0 - y),)
        if k == "tanh":
            y = node.value
            return (g * (1.0 - y * y),)
        if k == "relu":
            x = self._nodes[node.parents[0]].value
            return (g * (x > 0.0),)
        if k == "square":
            x = self._nodes[node.parents[0]].value
            return (2.0 * x * g,)
        if k == "smooth_hinge":
            x = self._nodes[node.parents[0]].value
            return (g * smooth_hinge_deriv(x, node.payload["width"]),)
        if k == "sum_pool":
            group = node.payload["group"]
            return (np.repeat(g, group, axis=0),)
        if k == "total_sum":
            x = self._nodes[node.parents[0]].value
            return (np.full(x.shape, float(g[0, 0])),)
        if k == "mse":
            pv = self._nodes[node.parents[0]].value
            tv = self._nodes[node.parents[1]].value
            d = (2.0 / pv.size) * (pv - tv) * float(g[0, 0])
            return (d, -d)
        if k == "concat_cols":
            s = node.payload["split"]
            return (g[:, :s], g[:, s:])
        if k == "external":
            return (_as_array(node.payload["vjp"](g)),)
        raise ContractError(f"unknown op kind '{k}'")


def smooth_hinge_value(t, width: float):
    t = np.asarray(t, dtype=np.float64)
    ramp = np.clip(t, 0.0, width)
    return ramp * ramp / (2.0 * width) + np.maximum(t - width, 0.0)


def smooth_hinge_deriv(t, width: float):
    t = np.asarray(t, dtype=np.float64)
    return np.clip(t / width, 0.0, 1.0)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: int


def grad_check(f, point, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``f`` with central differences.

    ``f`` takes (tape, leaf_tensor) and returns a scalar tensor on that tape.
    """
    x0 = _as_array(point)
    tape = Tape()
    leaf = tape.leaf(x0)
    root = f(tape, leaf)
    analytic = tape.grad(root, leaf)

    flat = x0.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (+1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            t2 = Tape()
            val = t2.value(f(t2, t2.leaf(xp.reshape(x0.shape))))
            fd[i] += sgn * float(val) / (2.0 * step)
    fd = fd.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1.0)
    rel = np.abs(analytic - fd) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel.ravel()[worst]), bool(rel.max() < tol), worst)


class Adam:
    """Adam on a flat dict of arrays; used by both network trainers."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            g = g.reshape(p.shape)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def clip_grad_norm(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    s = max_norm / total
    return {k: s * g for k, g in grads.items()}
