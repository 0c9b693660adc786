"""Dense float32 tensors with reverse-mode automatic differentiation and Adam.

Deliberately small: the primitive set below is exactly what the attention
actor-critic and its training updates need. Binary elementwise ops require
exact shape agreement (no implicit broadcasting); ``bias_add`` is the one
explicit row-broadcast primitive and ``scale`` the one scalar broadcast.
Full reductions accumulate in float64 before casting back to float32.

Operations record onto an explicit :class:`Tape` when one is active (used as a
context manager); with no active tape values are computed without recording,
which is the fast path for environment rollouts and target networks.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError

DTYPE = np.float32

_NEG_INF = np.float32(-1e9)  # additive mask value for softmax


class DimensionError(ContractError):
    """Operand shapes do not conform to the requested operation."""


class TapeError(ContractError):
    """Misuse of the recording or backward machinery."""


_ACTIVE_TAPE: "Tape | None" = None
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-operation NaN/Inf validation (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_c_contiguous(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d; preserve shape
    arr = np.asarray(data, dtype=DTYPE)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float32 array, optionally tracked for gradients.

    ``requires_grad`` is set explicitly for parameters and propagates to op
    results while a tape is active. Tensors hash by identity; gradient maps
    returned by :func:`backward` are keyed on the parameter objects.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_c_contiguous(data)
        self.requires_grad = requires_grad
        self.name = name
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or '<anon>'}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level primitives
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def param(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def const(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


class Tape:
    """Append-only record of primitive ops, topological by construction."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over a recorded tape.

    Returns a map from every reachable leaf tensor with ``requires_grad`` (the
    parameters) to its gradient array. Gradient accumulation is additive when
    a node fans out.
    """
    if loss.data.shape != ():
        raise TapeError(f"loss must be scalar-shaped, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    produced = {id(out) for out, _, _ in tape._nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, back in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, ig in zip(inputs, back(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = t
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    return {t: grads[k] for k, t in leaves.items() if k in grads}


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], back: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, inputs, back))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} must match exactly"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("elementwise-mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s32 = DTYPE(s)
    return _emit(a.data * s32, (a,), lambda g: (g * s32,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D weights applied to (batched) inputs, or a batched
    product with identical leading dimensions."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {ad.shape} @ {bd.shape}")
    if bd.ndim == 2:
        ok = ad.shape[-1] == bd.shape[0]
    elif ad.ndim == bd.ndim:
        ok = ad.shape[:-2] == bd.shape[:-2] and ad.shape[-1] == bd.shape[-2]
    else:
        ok = False
    if not ok:
        raise DimensionError(f"matmul: shapes {ad.shape} @ {bd.shape} do not conform")

    def back(g: np.ndarray):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), back)


def bdot(a: Tensor, b: Tensor) -> Tensor:
    """Batched dot along the last axis: (B, M, D) x (B, D) -> (B, M)."""
    ad_, bd = a.data, b.data
    if ad_.ndim != 3 or bd.ndim != 2 or ad_.shape[0] != bd.shape[0] or ad_.shape[2] != bd.shape[1]:
        raise DimensionError(f"bdot: shapes {ad_.shape} x {bd.shape} do not conform")

    def back(g: np.ndarray):
        ga = np.einsum("bm,bd->bmd", g, bd) if a.requires_grad else None
        gb = np.einsum("bmd,bm->bd", ad_, g) if b.requires_grad else None
        return ga, gb

    return _emit(np.einsum("bmd,bd->bm", ad_, bd), (a, b), back)


def bmix(w: Tensor, v: Tensor) -> Tensor:
    """Row mixture: weights (B, M) over values (B, M, D) -> (B, D)."""
    wd, vd = w.data, v.data
    if wd.ndim != 2 or vd.ndim != 3 or wd.shape != vd.shape[:2]:
        raise DimensionError(f"bmix: shapes {wd.shape} x {vd.shape} do not conform")

    def back(g: np.ndarray):
        gw = np.einsum("bd,bmd->bm", g, vd) if w.requires_grad else None
        gv = np.einsum("bm,bd->bmd", wd, g) if v.requires_grad else None
        return gw, gv

    return _emit(np.einsum("bm,bmd->bd", wd, vd), (w, v), back)


class freeze_params:
    """Temporarily clear requires_grad on the given tensors, so recording
    skips subgraphs that only depend on them (e.g. a critic held constant
    while differentiating through an action)."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self._saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, saved in zip(self.params, self._saved):
            p.requires_grad = saved
        return False


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis (the one sanctioned row broadcast)."""
    if b.data.ndim != 1 or a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"bias_add: shapes {a.data.shape} + {b.data.shape} do not conform")

    def back(g: np.ndarray):
        gb = None
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64).astype(DTYPE)
        return (g if a.requires_grad else None), gb

    return _emit(a.data + b.data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x; one tape node instead of two."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or bd.ndim != 1 or xd.shape[1] != wd.shape[0] or wd.shape[1] != bd.shape[0]:
        raise DimensionError(f"linear: shapes {xd.shape} @ {wd.shape} + {bd.shape} do not conform")

    def back(g: np.ndarray):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(DTYPE) if b.requires_grad else None
        return gx, gw, gb

    return _emit(xd @ wd + bd, (x, w, b), back)


def linear_relu(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused max(x @ w + b, 0); the encoder's hot path."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or bd.ndim != 1 or xd.shape[1] != wd.shape[0] or wd.shape[1] != bd.shape[0]:
        raise DimensionError(f"linear_relu: shapes {xd.shape} @ {wd.shape} + {bd.shape} do not conform")
    out = np.maximum(xd @ wd + bd, DTYPE(0))

    def back(g: np.ndarray):
        gz = g * (out > 0)
        gx = gz @ wd.T if x.requires_grad else None
        gw = xd.T @ gz if w.requires_grad else None
        gb = gz.sum(axis=0, dtype=np.float64).astype(DTYPE) if b.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, w, b), back)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.maximum(ad, DTYPE(0)), (a,), lambda g: (g * (ad > 0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (g * (2.0 * ad),))


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.data.ndim == 0 or a.data.shape[-1] == 0:
        raise DimensionError(f"softmax-lastdim: invalid shape {a.data.shape}")
    x = a.data
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(DTYPE)

    def back(g: np.ndarray):
        dot = np.sum(out * g, axis=-1, keepdims=True, dtype=np.float64).astype(DTYPE)
        return (out * (g - dot),)

    return _emit(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat-lastdim: need at least one input")
    shapes = [t.data.shape for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim if ndim else axis
    for s in shapes[1:]:
        if len(s) != ndim or s[:ax] != shapes[0][:ax] or s[ax + 1 :] != shapes[0][ax + 1 :]:
            raise DimensionError(f"concat-lastdim: incompatible shapes {shapes} on axis {axis}")
    sizes = [s[ax] for s in shapes]
    offsets = np.cumsum(sizes)[:-1]

    def back(g: np.ndarray):
        pieces = np.split(g, offsets, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    return _emit(out, (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=DTYPE)
    return _emit(out, (a,), lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit(_as_c_contiguous(out), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got shape {a.data.shape}")
    return _emit(_as_c_contiguous(a.data.T), (a,), lambda g: (g.T,))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first axis."""
    shape = a.data.shape
    if a.data.ndim < 1 or not 0 <= start < stop <= shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] invalid for shape {shape}")

    def back(g: np.ndarray):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _emit(_as_c_contiguous(a.data[start:stop]), (a,), back)


def swap01(a: Tensor) -> Tensor:
    """Swap the first two axes of a >= 2-D tensor."""
    if a.data.ndim < 2:
        raise DimensionError(f"swap01: expected >= 2-D, got shape {a.data.shape}")
    return _emit(_as_c_contiguous(np.swapaxes(a.data, 0, 1)), (a,), lambda g: (np.swapaxes(g, 0, 1),))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": scale,
    "relu": relu,
    "tanh": tanh,
    "softmax-lastdim": softmax_lastdim,
    "concat-lastdim": concat,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "square": square,
}


def primitive_forward(op_kind: str, *inputs) -> Tensor:
    """Dispatch a primitive by name (recorded on the active tape, if any)."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive op-kind {op_kind!r}") from None
    if op_kind == "concat-lastdim":
        return fn(list(inputs))
    return fn(*inputs)


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Updates are applied in place; parameters missing from the gradient map are
    treated as zero-gradient. Updated values are validated to be finite so a
    diverging run fails promptly instead of polluting downstream state.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
            raise ContractError("invalid Adam hyperparameters")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise DimensionError(
                    f"adam: gradient shape {g.shape} != parameter shape {p.data.shape}"
                    f" for {p.name or '<anon>'}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(
                    f"non-finite parameter after Adam step {self.t}: {p.name or '<anon>'}"
                )
