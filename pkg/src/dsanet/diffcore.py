"""Reverse-mode differentiable tensor substrate.

Small tape-based autodiff over numpy: enough operators for the model's
attention blocks, graph convolutions, and contrastive losses, plus a
parameter store with a binary checkpoint format and a central-difference
gradient checker.

Conventions:
  * values are float64 ndarrays (scalars are 0-d); parameters are kept
    float32-representable so checkpoints round-trip bit-exactly while
    all arithmetic runs in double precision (central differences at
    step 1e-4 are hopeless in pure float32),
  * hard selections (top-k, argmin, gathers) route gradients only
    through the selected elements,
  * backward() accumulates into .grad; propagation itself uses fresh
    per-call buffers so shared subgraphs can be re-traversed without
    double counting,
  * log() is clamped at 1e-8 so cross-entropy survives softmax
    underflow.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    IoFailure,
    KOutOfRange,
    MissingFile,
    NonFiniteResult,
    NonScalarLoss,
    ShapeMismatch,
    ZeroVector,
)

LOG_CLAMP = 1e-8
_CKPT_MAGIC = b"DSCK"
_CKPT_VERSION = 1


class DTensor:
    """A value in the computation graph.

    grad is lazily allocated; requires_grad marks both true leaves
    (parameters, differentiable inputs) and any node derived from one.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple["DTensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small amount of operator sugar; the module-level ops are the API
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(np.asarray(x, dtype=np.float64))


def constant(values) -> DTensor:
    return DTensor(values, requires_grad=False)


def leaf(values, requires_grad: bool = True) -> DTensor:
    return DTensor(values, requires_grad=requires_grad)


def _result(values: np.ndarray, parents: tuple[DTensor, ...], backward, op: str) -> DTensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteResult(f"{op} produced non-finite values")
    rg = any(p.requires_grad for p in parents)
    return DTensor(values, requires_grad=rg, _parents=parents, _backward=backward if rg else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --- arithmetic -------------------------------------------------------------


def add(a: DTensor, b: DTensor) -> DTensor:
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bwd, "add")


def sub(a: DTensor, b: DTensor) -> DTensor:
    out = a.values - b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(out, (a, b), bwd, "sub")


def mul(a: DTensor, b: DTensor) -> DTensor:
    out = a.values * b.values

    def bwd(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _result(out, (a, b), bwd, "mul")


def scale(a: DTensor, c: float) -> DTensor:
    out = a.values * c

    def bwd(g):
        return (g * c,)

    return _result(out, (a,), bwd, "scale")


def matmul(a: DTensor, b: DTensor) -> DTensor:
    """Matrix product for the 2Dx2D, 1Dx2D and 2Dx1D cases."""
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatch(f"matmul on ranks {a.ndim}, {b.ndim}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bwd(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.values.T, a.values.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.values @ g, np.outer(a.values, g)
        return np.outer(g, b.values), a.values.T @ g

    return _result(out, (a, b), bwd, "matmul")


def transpose(a: DTensor) -> DTensor:
    if a.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    out = a.values.T

    def bwd(g):
        return (g.T,)

    return _result(out, (a,), bwd, "transpose")


def concat(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), bwd, "concat")


def stack_rows(vectors: Sequence[DTensor]) -> DTensor:
    out = np.stack([v.values for v in vectors], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(vectors)))

    return _result(out, tuple(vectors), bwd, "stack_rows")


def gather(a: DTensor, indices: np.ndarray, axis: int = 0) -> DTensor:
    """Select rows (axis 0) or elements of a vector; grads scatter back."""
    idx = np.asarray(indices, dtype=np.int64)
    if axis != 0:
        raise ShapeMismatch("gather supports axis 0 only")
    out = a.values[idx]

    def bwd(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(out, (a,), bwd, "gather")


def slice_cols(a: DTensor, start: int, stop: int) -> DTensor:
    if a.ndim != 2:
        raise ShapeMismatch("slice_cols expects a matrix")
    out = a.values[:, start:stop]

    def bwd(g):
        ga = np.zeros_like(a.values)
        ga[:, start:stop] = g
        return (ga,)

    return _result(out, (a,), bwd, "slice_cols")


# --- reductions -------------------------------------------------------------


def vsum(a: DTensor, axis: int | None = None) -> DTensor:
    out = a.values.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.full_like(a.values, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), bwd, "sum")


def mean(a: DTensor, axis: int | None = None) -> DTensor:
    count = a.values.size if axis is None else a.shape[axis]
    return scale(vsum(a, axis=axis), 1.0 / count)


def min_axis(a: DTensor, axis: int) -> DTensor:
    """Hard minimum along an axis; subgradient flows to the first argmin."""
    idx = np.argmin(a.values, axis=axis)
    out = np.take_along_axis(a.values, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        ga = np.zeros_like(a.values)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (ga,)

    return _result(out, (a,), bwd, "min_axis")


def _topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    # descending by value, ties broken by lower index (stable sort on -x)
    return np.argsort(-x, kind="stable")[:k]


def topk_mean(a: DTensor, k: int) -> DTensor:
    """Mean of the k largest entries.

    1-D input -> scalar; 2-D input -> per-column vector (pooling over
    rows).  Gradient 1/k at selected entries only.
    """
    if a.ndim == 1:
        n = a.shape[0]
        if not 1 <= k <= n:
            raise KOutOfRange(f"k={k} outside [1, {n}]")
        sel = _topk_indices(a.values, k)
        out = a.values[sel].sum(dtype=np.float64) / k

        def bwd(g):
            ga = np.zeros_like(a.values)
            ga[sel] = float(g) / k
            return (ga,)

        return _result(out, (a,), bwd, "topk_mean")

    if a.ndim == 2:
        n, c = a.shape
        if not 1 <= k <= n:
            raise KOutOfRange(f"k={k} outside [1, {n}]")
        sels = [_topk_indices(a.values[:, j], k) for j in range(c)]
        out = np.array([a.values[sels[j], j].sum(dtype=np.float64) / k for j in range(c)])

        def bwd(g):
            ga = np.zeros_like(a.values)
            for j in range(c):
                ga[sels[j], j] += g[j] / k
            return (ga,)

        return _result(out, (a,), bwd, "topk_mean")

    raise ShapeMismatch("topk_mean expects rank 1 or 2")


# --- elementwise nonlinearities ---------------------------------------------


def relu(a: DTensor) -> DTensor:
    out = np.maximum(a.values, 0.0)

    def bwd(g):
        return (g * (a.values > 0.0),)

    return _result(out, (a,), bwd, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: DTensor) -> DTensor:
    """tanh-approximation GELU (differentiable everywhere)."""
    x = a.values
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _result(out, (a,), bwd, "gelu")


def sigmoid(a: DTensor) -> DTensor:
    out = 1.0 / (1.0 + np.exp(-a.values))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bwd, "sigmoid")


def log(a: DTensor) -> DTensor:
    """log clamped below at LOG_CLAMP; zero gradient in the clamped region."""
    clamped = np.maximum(a.values, LOG_CLAMP)
    out = np.log(clamped)

    def bwd(g):
        return (g * (a.values > LOG_CLAMP) / clamped,)

    return _result(out, (a,), bwd, "log")


def exp(a: DTensor) -> DTensor:
    out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return _result(out, (a,), bwd, "exp")


def vabs(a: DTensor) -> DTensor:
    out = np.abs(a.values)

    def bwd(g):
        return (g * np.sign(a.values),)

    return _result(out, (a,), bwd, "abs")


def clip01(a: DTensor) -> DTensor:
    """Clamp into [0, 1]; gradient passes inside the bounds (inclusive),
    so values that sit exactly on a bound from rounding stay trainable."""
    out = np.clip(a.values, 0.0, 1.0)

    def bwd(g):
        return (g * ((a.values >= 0.0) & (a.values <= 1.0)),)

    return _result(out, (a,), bwd, "clip01")


# --- normalizations ----------------------------------------------------------


def row_softmax(a: DTensor, temperature: float = 1.0) -> DTensor:
    """Softmax along the last axis (rows of a matrix, or a whole vector)."""
    if temperature <= 0:
        raise ValueError("softmax temperature must be > 0")
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True, dtype=np.float64)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((out * (g - dot)) / temperature,)

    return _result(out, (a,), bwd, "row_softmax")


def l2_normalize(a: DTensor, eps: float = 0.0) -> DTensor:
    """Rows (last axis) scaled to unit L2 norm; raises on zero rows."""
    norms = np.linalg.norm(a.values, axis=-1, keepdims=True)
    if np.any(norms <= eps) or np.any(norms == 0.0):
        raise ZeroVector("cannot L2-normalize a zero-norm row")
    out = a.values / norms

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norms,)

    return _result(out, (a,), bwd, "l2_normalize")


def layer_norm(a: DTensor, gamma: DTensor, beta: DTensor, eps: float = 1e-5) -> DTensor:
    """Last-axis layer normalization with affine parameters."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeMismatch("layer_norm affine shape")
    x = a.values
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.values * xhat + beta.values

    def bwd(g):
        m = a.shape[-1]
        dxhat = g * gamma.values
        dgamma = (g * xhat).reshape(-1, m).sum(axis=0)
        dbeta = g.reshape(-1, m).sum(axis=0)
        # standard layernorm backward, fused form
        dx = (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _result(out, (a, gamma, beta), bwd, "layer_norm")


def rescale_rows_to(a: DTensor, target: DTensor) -> DTensor:
    """Rescale each row of `a` to the L2 norm of the matching row of
    `target`, keeping `a`'s direction.  Zero rows (on either side) map
    to zero rows with zero gradient.
    """
    if a.shape != target.shape or a.ndim != 2:
        raise ShapeMismatch(f"rescale_rows_to {a.shape} vs {target.shape}")
    na = np.linalg.norm(a.values, axis=1, keepdims=True)
    nt = np.linalg.norm(target.values, axis=1, keepdims=True)
    safe_na = np.where(na == 0.0, 1.0, na)
    safe_nt = np.where(nt == 0.0, 1.0, nt)
    a_hat = a.values / safe_na
    t_hat = target.values / safe_nt
    live = (na != 0.0) & (nt != 0.0)
    # ratio form: bit-exact identity when a equals target (nt/na == 1.0)
    out = np.where(live, a.values * (nt / safe_na), 0.0)

    def bwd(g):
        dots = (a_hat * g).sum(axis=1, keepdims=True)
        da = np.where(live, (nt / safe_na) * (g - a_hat * dots), 0.0)
        dt = np.where(live, t_hat * dots, 0.0)
        return da, dt

    return _result(out, (a, target), bwd, "rescale_rows_to")


def cosine_similarity(a: DTensor, b: DTensor) -> DTensor:
    """cos for two vectors (scalar) or row-wise for equal-shape matrices."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity {a.shape} vs {b.shape}")
    prod = mul(l2_normalize(a), l2_normalize(b))
    return vsum(prod, axis=-1) if a.ndim > 1 else vsum(prod)


# --- backward ----------------------------------------------------------------


def _topo_order(root: DTensor) -> list[DTensor]:
    order: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede consumers


def backward(loss: DTensor) -> None:
    """Populate grads of every reachable requires_grad tensor.

    Accumulates into .grad; propagation uses per-call buffers, so
    calling backward on losses that share subgraphs stays correct.
    """
    if loss.values.ndim != 0:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        contribs = node._backward(g)
        for parent, pg in zip(node._parents, contribs):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = np.asarray(pg, dtype=np.float64)


# --- parameter store ----------------------------------------------------------


def _snap32(values: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 (kept as float64 in memory).

    Keeps every parameter exactly representable in the checkpoint's
    float32 payload, so save -> load is lossless.
    """
    return values.astype(np.float32).astype(np.float64)


class ParameterStore:
    """Named parameters plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, DTensor] = {}
        self._trainable: dict[str, bool] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def register(self, name: str, values: np.ndarray, trainable: bool = True) -> DTensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = DTensor(_snap32(np.asarray(values, dtype=np.float64)), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> DTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, DTensor]]:
        return self._params.items()

    def trainable_items(self) -> list[tuple[str, DTensor]]:
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_elements(self) -> int:
        return sum(t.values.size for t in self._params.values())

    # --- checkpoint I/O (magic DSCK, little-endian) ---

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                fh.write(_CKPT_MAGIC)
                fh.write(struct.pack("<I", _CKPT_VERSION))
                fh.write(struct.pack("<I", len(self._params)))
                for name in sorted(self._params):
                    t = self._params[name]
                    raw = name.encode("utf-8")
                    fh.write(struct.pack("<I", len(raw)))
                    fh.write(raw)
                    fh.write(struct.pack("<I", t.values.ndim))
                    fh.write(struct.pack(f"<{t.values.ndim}I", *t.values.shape))
                    fh.write(t.values.astype("<f4").tobytes())
        except OSError as e:
            raise IoFailure(f"cannot write checkpoint {path}: {e}") from e

    @staticmethod
    def read_checkpoint(path) -> dict[str, np.ndarray]:
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except FileNotFoundError as e:
            raise MissingFile(str(path)) from e
        except OSError as e:
            raise IoFailure(f"cannot read checkpoint {path}: {e}") from e
        if blob[:4] != _CKPT_MAGIC:
            raise BadMagic(f"{path}: expected DSCK header")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != _CKPT_VERSION:
            raise BadMagic(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", blob, 8)
        off = 12
        out: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", blob, off)
                off += 4
                name = blob[off : off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<I", blob, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", blob, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                payload = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
                off += 4 * size
                out[name] = payload.reshape(dims).astype(np.float64)
        except (struct.error, ValueError) as e:
            raise DimensionMismatch(f"{path}: truncated checkpoint payload") from e
        if off != len(blob):
            raise DimensionMismatch(f"{path}: trailing bytes in checkpoint")
        return out

    def load(self, path) -> None:
        loaded = self.read_checkpoint(path)
        missing = set(self._params) - set(loaded)
        extra = set(loaded) - set(self._params)
        if missing or extra:
            raise DimensionMismatch(
                f"checkpoint parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        for name, values in loaded.items():
            t = self._params[name]
            if t.values.shape != values.shape:
                raise DimensionMismatch(
                    f"parameter {name!r}: checkpoint shape {values.shape} vs model {t.values.shape}"
                )
            t.values = values


# --- finite differences ---------------------------------------------------------


class FinDiffEntry:
    """Per-parameter result of a finite-difference check."""

    __slots__ = ("name", "max_rel_err", "n_checked")

    def __init__(self, name: str, max_rel_err: float, n_checked: int):
        self.name = name
        self.max_rel_err = max_rel_err
        self.n_checked = n_checked


class FinDiffReport:
    def __init__(self, entries: list[FinDiffEntry], tol: float, deterministic: bool):
        self.entries = entries
        self.tol = tol
        self.deterministic = deterministic

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_rel_err < self.tol

    def failures(self) -> list[FinDiffEntry]:
        return [e for e in self.entries if e.max_rel_err >= self.tol]


def finite_diff_check(
    fn: Callable[[], DTensor],
    params: dict[str, DTensor],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_entries_per_param: int | None = None,
    sample_seed: int = 0,
    grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> FinDiffReport:
    """Compare analytic gradients of fn() against central differences.

    fn must rebuild its graph on every call and be deterministic; a
    repeated baseline evaluation that disagrees marks the report
    non-deterministic.  Entries where both gradients are below 1e-6 in
    magnitude are treated as matching zeros.  grad_hook, if given, may
    mutate the analytic gradients before comparison (test plumbing for
    harness sanity checks).
    """
    from .prng import SplitMix64

    f0 = float(fn().values)
    if float(fn().values) != f0:
        return FinDiffReport([], tol, deterministic=False)

    for t in params.values():
        t.grad = None
    backward(fn())
    analytic = {
        name: (np.zeros_like(t.values) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    if grad_hook is not None:
        grad_hook(analytic)

    rng = SplitMix64(sample_seed)
    entries = []
    for name, t in params.items():
        flat = t.values.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = sorted(set(int(i) for i in rng.integers(max_entries_per_param, 0, n)))
        else:
            idxs = list(range(n))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().values)
            flat[i] = orig - step
            fm = float(fn().values)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num))
            if denom < 1e-6:
                continue
            worst = max(worst, abs(ga[i] - num) / denom)
        entries.append(FinDiffEntry(name, worst, len(idxs)))
    return FinDiffReport(entries, tol, deterministic=True)
