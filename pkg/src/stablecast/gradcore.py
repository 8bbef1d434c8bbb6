"""Dense float64 tensors with a reverse-mode tape, and the Adam update.

Only the handful of primitives an N-BEATS stack and its scaled losses need
are provided. Every op is recorded on an explicit :class:`Tape` in creation
order, so the tape is topologically sorted by construction and a backward
pass is a single reverse sweep. Backward passes never mutate the tape, which
lets the trainer pull two independent gradients out of one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class Tensor:
    """A node on a tape: a float64 array plus how it was produced."""

    __slots__ = ("values", "index", "parents", "vjp", "name")

    def __init__(self, values, index, parents=(), vjp=None, name=None):
        self.values = values
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def is_scalar(self) -> bool:
        return self.values.size == 1

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor#{self.index}{label} shape={self.shape}>"


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tape:
    """Ordered record of primitive ops (a Wengert list)."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, values, parents=(), vjp=None, name=None) -> Tensor:
        node = Tensor(values, len(self.nodes), tuple(parents), vjp, name)
        self.nodes.append(node)
        return node

    def _own(self, *nodes: Tensor) -> None:
        for n in nodes:
            if n.index >= len(self.nodes) or self.nodes[n.index] is not n:
                raise ContractError(f"{n!r} does not belong to this tape")

    # leaves -------------------------------------------------------------

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        """Register an input or parameter. Named leaves get gradients."""
        return self._push(_as_array(value), name=name)

    def constant(self, value) -> Tensor:
        return self._push(_as_array(value))

    def parameters(self, params: "ParameterSet") -> Dict[str, Tensor]:
        return {name: self.leaf(arr, name=name) for name, arr in params.items()}

    # primitives ---------------------------------------------------------

    def affine(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        self._own(x, weight, bias)
        xv, wv, bv = x.values, weight.values, bias.values
        if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
            raise DimensionError(
                f"affine expects (batch,in), (in,out), (out,); got {xv.shape}, {wv.shape}, {bv.shape}"
            )
        if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
            raise DimensionError(f"affine shape mismatch: {xv.shape} @ {wv.shape} + {bv.shape}")

        def vjp(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)

        return self._push(xv @ wv + bv, (x, weight, bias), vjp)

    def relu(self, x: Tensor) -> Tensor:
        self._own(x)
        mask = x.values > 0.0  # subgradient 0 at exactly 0
        return self._push(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        self._same_shape(a, b, "add")
        return self._push(a.values + b.values, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        self._same_shape(a, b, "sub")
        return self._push(a.values - b.values, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; either side may be a scalar."""
        self._own(a, b)
        av, bv = a.values, b.values
        if av.shape != bv.shape and av.size != 1 and bv.size != 1:
            raise DimensionError(f"mul shape mismatch: {av.shape} vs {bv.shape}")

        def vjp(g):
            ga, gb = g * bv, g * av
            if av.size == 1 and ga.size != 1:
                ga = ga.sum().reshape(av.shape)
            if bv.size == 1 and gb.size != 1:
                gb = gb.sum().reshape(bv.shape)
            return ga, gb

        return self._push(av * bv, (a, b), vjp)

    def scale(self, x: Tensor, c) -> Tensor:
        """Multiply by a non-differentiable constant (scalar or same shape)."""
        self._own(x)
        c = np.asarray(c, dtype=np.float64)
        if c.size != 1 and c.shape != x.shape:
            raise DimensionError(f"scale factor shape {c.shape} vs {x.shape}")
        return self._push(x.values * c, (x,), lambda g: (g * c,))

    def square(self, x: Tensor) -> Tensor:
        self._own(x)
        xv = x.values
        return self._push(xv * xv, (x,), lambda g: (2.0 * xv * g,))

    def sqrt(self, x: Tensor) -> Tensor:
        self._own(x)
        if np.any(x.values < 0.0):
            raise ContractError("sqrt of a negative value")
        out = np.sqrt(x.values)

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(out > 0.0, 0.5 / out, 0.0)
            return (g * d,)

        return self._push(out, (x,), vjp)

    def exp(self, x: Tensor) -> Tensor:
        self._own(x)
        out = np.exp(x.values)
        return self._push(out, (x,), lambda g: (g * out,))

    def columns(self, x: Tensor, start: int, stop: int) -> Tensor:
        self._own(x)
        if x.values.ndim != 2:
            raise DimensionError("columns expects a matrix")
        shape = x.values.shape

        def vjp(g):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self._push(x.values[:, start:stop].copy(), (x,), vjp)

    def rows(self, x: Tensor, start: int, stop: int) -> Tensor:
        self._own(x)
        shape = x.values.shape

        def vjp(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return self._push(x.values[start:stop].copy(), (x,), vjp)

    def concat_rows(self, parts: Sequence[Tensor]) -> Tensor:
        self._own(*parts)
        sizes = np.cumsum([0] + [p.values.shape[0] for p in parts])

        def vjp(g):
            return tuple(g[sizes[i] : sizes[i + 1]] for i in range(len(parts)))

        return self._push(np.concatenate([p.values for p in parts], axis=0), tuple(parts), vjp)

    def mean(self, x: Tensor, axis: Optional[int] = None) -> Tensor:
        self._own(x)
        xv = x.values
        if axis is None:
            n = xv.size
            return self._push(np.array(xv.mean()), (x,), lambda g: (np.full(xv.shape, g / n),))
        n = xv.shape[axis]

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, xv.shape).copy(),)

        return self._push(xv.mean(axis=axis), (x,), vjp)

    def sum(self, x: Tensor) -> Tensor:
        self._own(x)
        shape = x.values.shape
        return self._push(np.array(x.values.sum()), (x,), lambda g: (np.full(shape, float(g)),))

    @staticmethod
    def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
        if a.values.shape != b.values.shape:
            raise DimensionError(f"{op} shape mismatch: {a.values.shape} vs {b.values.shape}")


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradients of a scalar node w.r.t. every named leaf on ``tape``.

    Leaves the loss does not depend on receive zeros. The tape is read only,
    so further passes from other scalars are unaffected.
    """
    tape._own(loss)
    if not loss.is_scalar:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.values)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = adj.pop(node.index, None)
        if g is None or node.vjp is None:
            if g is not None:
                adj[node.index] = g  # leaf: keep for collection
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            prev = adj.get(parent.index)
            adj[parent.index] = pg if prev is None else prev + pg
    grads = {}
    for node in tape.nodes:
        if node.name is not None and node.vjp is None:
            g = adj.get(node.index)
            grads[node.name] = np.zeros_like(node.values) if g is None else g.reshape(node.values.shape)
    return grads


class ParameterSet(dict):
    """Ordered name -> float64 array mapping with flatten/unflatten."""

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.values()))

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self.values()])

    def unflatten(self, flat: np.ndarray) -> "ParameterSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise DimensionError(f"expected {self.size} values, got {flat.size}")
        out, pos = ParameterSet(), 0
        for name, arr in self.items():
            out[name] = flat[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self.items())


def flatten_grads(grads: Mapping[str, np.ndarray], like: Iterable[str]) -> np.ndarray:
    return np.concatenate([grads[k].reshape(-1) for k in like])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, grad: Mapping[str, np.ndarray], state: AdamState) -> ParameterSet:
    """One bias-corrected Adam update. Moments in ``state`` are updated in place."""
    if set(grad) != set(params):
        missing = set(params) ^ set(grad)
        raise ContractError(f"gradient keys do not match parameters: {sorted(missing)}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = ParameterSet()
    for name, p in params.items():
        g = np.asarray(grad[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out

