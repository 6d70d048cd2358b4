"""Minimal reverse-mode differentiation for the fixed op set of the pipeline.

A :class:`Tape` wraps a *build function* ``build(tape) -> Node``. Each call to
:meth:`Tape.run` replays the build function against fresh parameter/input
values, recording one node per primitive op; :meth:`Tape.backward` then walks
the record in reverse, visiting every node exactly once.

Supported primitives: matmul (plain and ``A @ B.T``), bias add, elementwise
sum, tanh, elu1p,
reshape, max-pool over the patch axis, row-wise l2 normalization, InfoNCE
with capped inverse temperature, FLOPs and overuse reductions, and scalar
sums/scalings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lexalign.errors import NumericalError, ValidationError
from lexalign.lexcore import NORM_FLOOR

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
# relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


@dataclass
class Node:
    index: int
    op: str
    value: np.ndarray
    parents: tuple[int, ...] = ()
    backward: Callable | None = None
    name: str | None = None
    meta: dict = field(default_factory=dict)
    adjoint: np.ndarray | None = None

    @property
    def label(self) -> str:
        return f"#{self.index} {self.op}" + (f" '{self.name}'" if self.name else "")


class Tape:
    def __init__(self, build: Callable[["Tape"], Node]):
        self.build = build
        self.nodes: list[Node] = []
        self._params: dict[str, np.ndarray] = {}
        self._inputs: dict[str, np.ndarray] = {}
        self._param_nodes: dict[str, int] = {}
        self.tags: dict[str, Node] = {}

    # -- recording -------------------------------------------------------
    def _push(self, op, value, parents=(), backward=None, name=None, **meta) -> Node:
        if not (isinstance(value, np.ndarray) and value.dtype == np.float64):
            value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), op, value, tuple(p.index for p in parents), backward, name, meta)
        # a sum is non-finite iff some entry is (or the entries overflow, also a failure)
        if not math.isfinite(value.sum()):
            raise NumericalError(f"non-finite value produced at node {node.label}")
        self.nodes.append(node)
        return node

    def tag(self, node: Node, name: str) -> Node:
        self.tags[name] = node
        return node

    def param(self, name: str) -> Node:
        if name in self._param_nodes:
            return self.nodes[self._param_nodes[name]]
        try:
            value = self._params[name]
        except KeyError:
            raise ValidationError(f"graph requested unknown parameter {name!r}") from None
        node = self._push("param", value, name=name)
        self._param_nodes[name] = node.index
        return node

    def input(self, name: str) -> Node:
        try:
            value = self._inputs[name]
        except KeyError:
            raise ValidationError(f"graph requested unknown input {name!r}") from None
        return self._push("input", value, name=name)

    def matmul(self, a: Node, b: Node) -> Node:
        A, B = a.value, b.value
        return self._push("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))

    def matmul_nt(self, a: Node, b: Node) -> Node:
        """``a @ b.T``"""
        A, B = a.value, b.value
        return self._push("matmul_nt", A @ B.T, (a, b), lambda g: (g @ B, g.T @ A))

    def add_bias(self, x: Node, b: Node) -> Node:
        return self._push("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        return self._push("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))

    def elu1p(self, x: Node) -> Node:
        X = x.value
        neg = np.exp(np.minimum(X, 0.0))
        y = np.where(X >= 0, X + 1.0, neg)
        slope = np.where(X >= 0, 1.0, neg)
        return self._push("elu1p", y, (x,), lambda g: (g * slope,))

    def reshape(self, x: Node, shape) -> Node:
        old = x.value.shape
        return self._push("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def max_pool(self, x: Node) -> Node:
        """Max over axis 1 of an N x n x V tensor; ties route to the lowest row."""
        X = x.value
        arg = X.argmax(axis=1)  # first occurrence = lowest row index
        y = np.take_along_axis(X, arg[:, None, :], axis=1)[:, 0, :]
        tied = (X == y[:, None, :]).sum(axis=1) > 1

        def back(g):
            out = np.zeros_like(X)
            np.put_along_axis(out, arg[:, None, :], g[:, None, :], axis=1)
            return (out,)

        return self._push("max_pool", y, (x,), back, argmax=arg, tied=tied)

    def normalize_rows(self, x: Node) -> Node:
        X = x.value
        norms = np.sqrt(np.einsum("ij,ij->i", X, X))
        if np.any(~(norms > NORM_FLOOR)):
            raise NumericalError(f"row norm below {NORM_FLOOR} at normalize (node #{len(self.nodes)})")
        Y = X / norms[:, None]

        def back(g):
            proj = np.einsum("ij,ij->i", Y, g)
            return ((g - Y * proj[:, None]) / norms[:, None],)

        return self._push("normalize_rows", Y, (x,), back)

    def info_nce(self, a: Node, b: Node, log_inverse: Node, max_inverse: float) -> Node:
        """One direction of InfoNCE; ``log_inverse`` is the scalar ``log(1/tau)``."""
        A, B = a.value, b.value
        n = A.shape[0]
        if n < 2:
            raise ValidationError("contrastive loss needs at least 2 pairs")
        # compare in log space so a runaway temperature cannot overflow exp()
        clamped = float(log_inverse.value) >= math.log(max_inverse)
        raw = max_inverse if clamped else math.exp(float(log_inverse.value))
        scale = raw
        sims = A @ B.T
        logits = scale * sims
        peak = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - peak)
        p = e / e.sum(axis=1, keepdims=True)
        loss = float(np.mean(-np.log(np.diag(p))))

        def back(g):
            G = (p - np.eye(n)) * (float(g) / n)
            d_scale = float(np.sum(G * sims))
            d_log = 0.0 if clamped else d_scale * raw
            return scale * (G @ B), scale * (G.T @ A), np.asarray(d_log)

        return self._push("info_nce", loss, (a, b, log_inverse), back)

    def flops(self, s: Node) -> Node:
        S = s.value
        n = S.shape[0]
        means = S.mean(axis=0)

        def back(g):
            return (np.broadcast_to(2.0 * means * (float(g) / n), S.shape).copy(),)

        return self._push("flops", float(means @ means), (s,), back)

    def overuse(self, s: Node) -> Node:
        S = s.value
        n, v = S.shape
        means = S.mean(axis=0)
        total = means.sum()
        if not total > 0:
            raise NumericalError("overuse penalty undefined for an all-zero batch")
        cubes = float(np.sum(means**3))

        def back(g):
            d_means = v * (3.0 * means**2 / total - cubes / total**2)
            return (np.broadcast_to(d_means * (float(g) / n), S.shape).copy(),)

        return self._push("overuse", v * cubes / total, (s,), back)

    def sum_squares(self, x: Node) -> Node:
        X = x.value
        return self._push("sum_squares", float(np.sum(X * X)), (x,), lambda g: (2.0 * float(g) * X,))

    def plus(self, a: Node, b: Node) -> Node:
        """Elementwise sum of two same-shape tensors."""
        return self._push("plus", a.value + b.value, (a, b), lambda g: (g, g))

    def add(self, *terms: Node) -> Node:
        total = sum(float(t.value) for t in terms)
        return self._push("add", total, terms, lambda g: tuple(np.asarray(g) for _ in terms))

    def scale(self, x: Node, c: float) -> Node:
        return self._push("scale", c * x.value, (x,), lambda g: (c * g,))

    # -- execution -------------------------------------------------------
    def run(self, params: dict, inputs: dict | None = None) -> Node:
        self.nodes = []
        self._param_nodes = {}
        self.tags = {}
        self._params = params
        self._inputs = inputs or {}
        out = self.build(self)
        if out.value.size != 1:
            raise ValidationError("tape output must be a scalar loss")
        return out

    def backward(self, out: Node | None = None) -> dict[str, np.ndarray]:
        out = out if out is not None else self.nodes[-1]
        for node in self.nodes:
            node.adjoint = None
        out.adjoint = np.ones_like(out.value)
        for node in reversed(self.nodes[: out.index + 1]):
            if node.adjoint is None or node.backward is None:
                continue
            grads = node.backward(node.adjoint)
            for parent_index, grad in zip(node.parents, grads):
                grad = np.asarray(grad, dtype=np.float64)
                if not np.all(np.isfinite(grad)):
                    raise NumericalError(f"non-finite gradient flowing out of node {node.label}")
                parent = self.nodes[parent_index]
                parent.adjoint = grad.copy() if parent.adjoint is None else parent.adjoint + grad
        grads = {}
        for name, value in self._params.items():
            idx = self._param_nodes.get(name)
            adj = None if idx is None else self.nodes[idx].adjoint
            grads[name] = np.zeros_like(value, dtype=np.float64) if adj is None else adj.reshape(np.shape(value))
        return grads

    def pool_signature(self) -> list[np.ndarray]:
        return [n.meta["argmax"] for n in self.nodes if n.op == "max_pool"]

    def pool_ties(self) -> list[np.ndarray]:
        return [n.meta["tied"] for n in self.nodes if n.op == "max_pool"]


def forward_backward(tape: Tape, params: dict, inputs: dict | None = None):
    """Return ``(loss, grads)`` with one gradient array per parameter."""
    out = tape.run(params, inputs)
    return float(out.value), tape.backward(out)


def finite_diff(f: Callable[[np.ndarray], float], x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as ``x``."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"function is not finite around coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    mean_rel_err: float
    checked: int
    skipped: int
    passed: bool


@dataclass
class GradReport:
    eps: float
    tol: float
    params: list[ParamCheck]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def failures(self) -> list[str]:
        return [p.name for p in self.params if not p.passed]

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def as_table(self) -> str:
        rows = [f"{'parameter':<14}{'max_rel_err':>14}{'mean_rel_err':>14}{'checked':>9}{'skipped':>9}  status"]
        for p in self.params:
            rows.append(
                f"{p.name:<14}{p.max_rel_err:>14.3e}{p.mean_rel_err:>14.3e}"
                f"{p.checked:>9d}{p.skipped:>9d}  {'ok' if p.passed else 'FAIL'}"
            )
        rows.append(f"eps={self.eps:g} tol={self.tol:g} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def _same_signature(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(tape: Tape, params: dict, inputs: dict | None = None, eps: float = DEFAULT_EPS,
               tol: float = DEFAULT_TOL, names=None) -> GradReport:
    """Compare tape gradients with central differences, parameter by parameter.

    Coordinates whose perturbation changes any max-pool argmax are skipped:
    the loss is not differentiable there.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = forward_backward(tape, params, inputs)
    base_sig = [s.copy() for s in tape.pool_signature()]

    checks = []
    for name in names or list(params):
        value = params[name]
        flat = value.reshape(-1)
        analytic = grads[name].reshape(-1)
        errs = []
        skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(tape.run(params, inputs).value)
            sig_p = tape.pool_signature()
            flat[i] = orig - eps
            fm = float(tape.run(params, inputs).value)
            sig_m = tape.pool_signature()
            flat[i] = orig
            if not (_same_signature(base_sig, sig_p) and _same_signature(base_sig, sig_m)):
                skipped += 1
                continue
            errs.append(float(relative_error(analytic[i], (fp - fm) / (2.0 * eps))))
        errs = np.asarray(errs)
        max_err = float(errs.max()) if errs.size else 0.0
        mean_err = float(errs.mean()) if errs.size else 0.0
        checks.append(ParamCheck(name, max_err, mean_err, int(errs.size), skipped, max_err <= tol))
    return GradReport(eps, tol, checks)

