"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the contrastive models need are provided. Each op
returns a new ``Tensor`` that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` walks the graph
once in reverse topological order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from contextlib import contextmanager, nullcontext
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, FormatError, PersistenceError

NORM_FLOOR = 1e-12

_compute_dtype = np.float64


@contextmanager
def extended_precision():
    """Run forward ops in numpy's extended long double.

    Used by the finite-difference oracle so that its own roundoff sits well
    below the gradients it checks. Parameters stay float64.
    """
    global _compute_dtype
    previous = _compute_dtype
    _compute_dtype = np.longdouble
    try:
        yield
    finally:
        _compute_dtype = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "consumed", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Optional[Callable] = None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_compute_dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=tuple(parents) if needs else (),
                  backward_fn=fn if needs else None)


def _shape_error(op: str, *shapes):
    return ContractError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


_relu_margins = None


@contextmanager
def relu_margin_probe():
    """Collect min |pre-activation| of every ReLU evaluated inside the block."""
    global _relu_margins
    previous = _relu_margins
    _relu_margins = []
    try:
        yield _relu_margins
    finally:
        _relu_margins = previous


def kink_margin(fn: Callable[["ParamStore"], "Tensor"], params: "ParamStore") -> float:
    """Distance of the closest ReLU input to its kink in one forward of ``fn``."""
    with relu_margin_probe() as margins:
        fn(params)
    return min(margins, default=float("inf"))


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may instead be a bias matching a's last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise _shape_error("add", a.shape, b.shape)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an (N, C, H, W) map."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise _shape_error("add_channel_bias", x.shape, b.shape)
    return _node(x.data + b.data[None, :, None, None], (x, b),
                 lambda g: (g, g.sum(axis=(0, 2, 3))))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ContractError(f"transpose: expected a matrix, got shape {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_margins is not None:
        _relu_margins.append(float(np.abs(x.data).min()))
    # np.maximum propagates NaN, so divergence is not masked
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _node(out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    rest = {x.shape[:axis] + x.shape[axis + 1:] for x in xs}
    if len(rest) != 1:
        raise _shape_error("concat", *(x.shape for x in xs))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first axis."""
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise ContractError(f"slice_rows: [{start}, {stop}) outside {n} rows")

    def back(g):
        out = np.zeros(x.shape)
        out[start:stop] = g
        return (out,)

    return _node(x.data[start:stop], (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_over_set(x: Tensor) -> Tensor:
    """(B, K, F) -> (B, F) by summing over the set axis."""
    if x.data.ndim != 3:
        raise ContractError(f"sum_over_set: expected (B, K, F), got shape {x.shape}")
    k = x.shape[1]
    return _node(x.data.sum(axis=1), (x,), lambda g: (np.repeat(g[:, None, :], k, axis=1),))


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise unit normalisation; norms are floored at 1e-12."""
    if x.data.ndim != 2:
        raise ContractError(f"l2_normalize: expected a matrix, got shape {x.shape}")
    raw = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(raw, NORM_FLOOR)
    y = x.data / norm
    live = raw >= NORM_FLOOR

    def back(g):
        radial = y * (y * g).sum(axis=1, keepdims=True)
        return (np.where(live, g - radial, g) / norm,)

    return _node(y, (x,), back)


# --------------------------------------------------------------------------
# convolution and pooling, (N, C, H, W) layout
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (Cout, C, kh, kw) weights."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise _shape_error("conv2d", x.shape, w.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        gt = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (gt.T @ cols).reshape(w.shape)
        dcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw

    return _node(np.ascontiguousarray(out), (x, w), back)


def mean_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.data.ndim != 4:
        raise ContractError(f"mean_pool: expected (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ContractError(f"mean_pool: window {size} larger than map {h}x{w}")
    core = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    out = core.mean(axis=(3, 5))

    def back(g):
        dx = np.zeros((n, c, h, w))
        spread = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        dx[:, :, :ho * size, :wo * size] = spread
        return (dx,)

    return _node(out, (x,), back)


def global_mean_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ContractError(f"global_mean_pool: expected (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def softmax_cross_entropy_rows(logits: Tensor, targets: Sequence[int],
                               exclude: Optional[np.ndarray] = None) -> Tensor:
    """Mean over rows of -log softmax(row)[target].

    Entries flagged in ``exclude`` take no part in the normaliser.
    """
    z = logits.data
    if z.ndim != 2:
        raise ContractError(f"softmax_cross_entropy_rows: expected a matrix, got shape {z.shape}")
    n, m = z.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,) or targets.min() < 0 or targets.max() >= m:
        raise ContractError(f"targets must be {n} indices into {m} columns")
    keep = np.ones_like(z, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    if exclude is not None and keep.shape != z.shape:
        raise _shape_error("softmax_cross_entropy_rows", z.shape, keep.shape)
    if not keep[np.arange(n), targets].all():
        raise ContractError("a target entry is excluded from its own softmax")
    masked = np.where(keep, z, -np.inf)
    zmax = masked.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(masked - zmax), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(denom)
    loss = -logp[np.arange(n), targets].mean()

    def back(g):
        p = e / denom
        p[np.arange(n), targets] -= 1.0
        return (p * (float(g) / n),)

    return _node(np.asarray(loss), (logits,), back)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise ContractError("backward already ran on this graph; rebuild it before calling again")
    if not loss.requires_grad:
        loss.consumed = True
        return
    grads = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss.consumed = True


# --------------------------------------------------------------------------
# parameter storage
# --------------------------------------------------------------------------

VOLP_MAGIC = b"VOLP"
VOLP_VERSION = 1


class ParamStore:
    """Ordered name -> leaf tensor mapping with VOLP checkpoint I/O."""

    def __init__(self, items: Iterable = ()):
        self._params = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self._params.items()}

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy(self) -> "ParamStore":
        return ParamStore((k, t.data.copy()) for k, t in self._params.items())

    def state(self) -> dict:
        return {k: t.data.copy() for k, t in self._params.items()}

    def equal(self, other: "ParamStore") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(self[k].data, other[k].data) for k in self))

    def to_bytes(self) -> bytes:
        out = [VOLP_MAGIC, struct.pack("<II", VOLP_VERSION, len(self._params))]
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
            out.append(t.data.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        pos = 0

        def take(n, field):
            nonlocal pos
            if pos + n > len(blob):
                raise FormatError(f"truncated checkpoint while reading {field}")
            chunk = blob[pos:pos + n]
            pos += n
            return chunk

        if take(4, "magic") != VOLP_MAGIC:
            raise FormatError("bad magic: expected b'VOLP'")
        version, count = struct.unpack("<II", take(8, "header"))
        if version != VOLP_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        store = cls()
        for i in range(count):
            (nlen,) = struct.unpack("<I", take(4, f"record[{i}].name length"))
            name = take(nlen, f"record[{i}].name").decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4, f"record[{i}].ndim"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"record[{i}].shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(take(8 * size, f"record[{i}].data"), dtype="<f8").reshape(shape)
            store.add(name, data)
        if pos != len(blob):
            raise FormatError("trailing bytes after last checkpoint record")
        return store

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ParamStore":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob)


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------

def finite_diff_check(fn: Callable[[ParamStore], Tensor], params: ParamStore, epsilon: float = 1e-6,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                      extended: bool = True) -> float:
    """Largest relative gap between autodiff and central-difference gradients.

    ``fn`` must rebuild its graph from ``params`` on every call. Per checked
    coordinate the error is |ad - fd| / max(1e-8, |ad| + |fd|). With
    ``max_coords`` set, that many coordinates are sampled per tensor. The
    perturbed evaluations run in extended precision unless ``extended`` is
    False; the divisor is the step actually realised in float64.
    """
    params.zero_grad()
    backward(fn(params))
    ad_all = params.grads()
    params.zero_grad()
    worst = 0.0
    for name, t in params.items():
        ad = ad_all[name].reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            hi, lo = orig + epsilon, orig - epsilon
            with extended_precision() if extended else nullcontext():
                flat[k] = hi
                up = np.longdouble(fn(params).data)
                flat[k] = lo
                down = np.longdouble(fn(params).data)
            flat[k] = orig
            fd = float((up - down) / (np.longdouble(hi) - np.longdouble(lo)))
            a = float(ad[k])
            worst = max(worst, abs(a - fd) / max(1e-8, abs(a) + abs(fd)))
    return worst
