"""
Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation returns a new `Tensor` holding a closure that pushes the output gradient back to
its inputs; `Tensor.backward` replays these closures in reverse topological order. All operations
take a leading batch axis.

References:
    - https://github.com/karpathy/micrograd
    - https://pytorch.org/tutorials/beginner/blitz/autograd_tutorial.html
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInput, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], None]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction in the current thread (inference)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """n-dimensional float64 value with an optional gradient of the same shape."""

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Backward] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, grad: np.ndarray, key=None):
        """Add `grad` to the gradient buffer (to the slice `key` of it, if given)."""
        if not self.requires_grad:
            return
        if key is None:
            if self.grad is None:
                self.grad = np.array(grad, dtype=np.float64)
            else:
                self.grad += grad
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if _is_basic_index(key):
            self.grad[key] += grad
        else:
            np.add.at(self.grad, key, grad)  # repeated indices accumulate

    def backward(self, grad: Optional[np.ndarray] = None):
        """Backpropagate from this tensor; a scalar tensor gets the seed gradient 1."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"Implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self.accumulate(grad)
        for node in reversed(_topological_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)


class Parameter(Tensor):
    """Named, optionally trainable leaf tensor of a model."""

    def __init__(self, data: ArrayLike, name: str, *, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) for k in keys)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    # iterative: recurrences over hundreds of timesteps exceed the recursion limit
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in visited)
    return order


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a.accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: a.accumulate(g * mask))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: a.accumulate(g * (1.0 - out**2)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: a.accumulate(g * out * (1.0 - out)))


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], *, training: bool):
    """Inverted dropout; the identity outside training."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise InvalidInput("Dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * mask, (a,), lambda g: a.accumulate(g * mask))


# ---------------------------------------------------------------------------------------------
# shape and reduction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) -> (..., n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:  # noqa: PLR2004
        raise ShapeError(f"Can't multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]))

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a.accumulate(g.reshape(a.shape)))


def flatten(a: Tensor) -> Tensor:
    """Keep the batch axis, flatten the rest."""
    return reshape(a, (a.shape[0], -1))


def getitem(a: Tensor, key) -> Tensor:
    return _result(a.data[key], (a,), lambda g: a.accumulate(g, key=key))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0, *sizes])

    def backward(g):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            t.accumulate(np.take(g, np.arange(start, stop), axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            t.accumulate(np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reduce_sum(a: Tensor, axis: Optional[int] = None, *, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), backward)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------------------------
# layers


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def embedding(table: Tensor, ids: np.ndarray, padding_id: Optional[int] = None) -> Tensor:
    """Rows of `table` selected by integer `ids`; the padding row gets no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InvalidInput(f"Token id out of range [0, {table.shape[0]})")

    def backward(g):
        if padding_id is not None:
            g = g * (ids != padding_id)[..., None]
        table.accumulate(g, key=ids)

    return _result(table.data[ids], (table,), backward)


def _same_padding(k: int) -> Tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """
    2D cross-correlation of (N, H, W, C_in) with filters (kh, kw, C_in, C_out) plus bias.

    `same` zero-pads to preserve (H, W), `valid` doesn't pad.
    """
    if x.ndim != 4 or w.ndim != 4:  # noqa: PLR2004
        raise ShapeError(f"conv2d expects (N, H, W, C) and 4D filters, got {x.shape}, {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, c_in, c_out = w.shape
    if c != c_in:
        raise ShapeError(f"Input has {c} channels, filters expect {c_in}")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        if kh > h or kw > wd:
            raise ShapeError(f"Kernel {(kh, kw)} doesn't fit input {(h, wd)} without padding")
        pt = pb = pl = pr = 0
    else:
        raise InvalidInput(f"Unknown padding '{padding}'")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, Ho, Wo, C, kh, kw)
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    kernel = w.data.reshape(kh * kw * c, c_out)
    out = (cols @ kernel + b.data).reshape(n, ho, wo, c_out)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        w.accumulate((cols.T @ g2).reshape(w.shape))
        b.accumulate(g2.sum(axis=0))
        if not x.requires_grad:
            return
        dcols = (g2 @ kernel.T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
        x.accumulate(dxp[:, pt : pt + h, pl : pl + wd, :])

    return _result(out, (x, w, b), backward)


def maxpool2d(x: Tensor, pool: Tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling of (N, H, W, C); ties go to the first in row-major order."""
    ph, pw = pool
    n, h, w, c = x.shape
    if ph < 1 or pw < 1:
        raise ShapeError(f"Pool size must be positive: {pool}")
    if ph > h or pw > w:
        raise ShapeError(f"Pool {pool} larger than input {(h, w)}")
    ho, wo = h // ph, w // pw
    blocks = (
        x.data[:, : ho * ph, : wo * pw, :]
        .reshape(n, ho, ph, wo, pw, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, ph * pw)
    )
    argmax = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, argmax, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        routed = routed.reshape(n, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
        full = np.zeros_like(x.data)
        full[:, : ho * ph, : wo * pw, :] = routed.reshape(n, ho * ph, wo * pw, c)
        x.accumulate(full)

    return _result(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel normalization over all axes but the last.

    In training mode the batch statistics are used and the running statistics are updated in
    place; otherwise the running statistics are used.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:  # noqa: PLR2004
            raise InvalidInput("Batch normalization in training mode needs a batch of 2 or more")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[-1]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        gamma.accumulate((g * xhat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        dxhat = g * gamma.data
        if not training:
            x.accumulate(dxhat * inv_std)
            return
        m = x.size // x.shape[-1]
        x.accumulate(
            inv_std
            / m
            * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        )

    return _result(out, (x, gamma, beta), backward)


def lstm_step(xw: Tensor, h: Tensor, c: Tensor, w_h: Tensor) -> Tensor:
    """
    One LSTM step with gates in order input, forget, candidate, output.

    Args:
        xw: Input projection incl. bias for this step, (N, 4H)
        h: Previous hidden state, (N, H)
        c: Previous cell state, (N, H)
        w_h: Recurrent weights, (H, 4H)

    Returns:
        New hidden and cell state concatenated, (N, 2H)
    """
    hidden = h.shape[-1]
    z = xw.data + h.data @ w_h.data
    i = _sigmoid(z[:, :hidden])
    f = _sigmoid(z[:, hidden : 2 * hidden])
    cand = np.tanh(z[:, 2 * hidden : 3 * hidden])
    o = _sigmoid(z[:, 3 * hidden :])
    c_new = f * c.data + i * cand
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    def backward(g):
        dh, dc = g[:, :hidden], g[:, hidden:]
        dc = dc + dh * o * (1.0 - tanh_c**2)
        dz = np.concatenate(
            (
                dc * cand * i * (1.0 - i),
                dc * c.data * f * (1.0 - f),
                dc * i * (1.0 - cand**2),
                dh * tanh_c * o * (1.0 - o),
            ),
            axis=1,
        )
        xw.accumulate(dz)
        h.accumulate(dz @ w_h.data.T)
        c.accumulate(dc * f)
        w_h.accumulate(h.data.T @ dz)

    return _result(np.concatenate((h_new, c_new), axis=1), (xw, h, c, w_h), backward)


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, *, reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over (N, T, D) -> (N, T, H), zero initial states."""
    n, steps, _ = x.shape
    hidden = w_h.shape[0]
    if w_x.shape != (x.shape[-1], 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(
            f"LSTM weights {w_x.shape}, {b.shape} don't fit input {x.shape} and hidden {hidden}"
        )
    xw = add(matmul(x, w_x), b)
    h = c = Tensor(np.zeros((n, hidden)))
    outputs: List[Optional[Tensor]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        state = lstm_step(getitem(xw, (slice(None), t)), h, c, w_h)
        h = getitem(state, (slice(None), slice(None, hidden)))
        c = getitem(state, (slice(None), slice(hidden, None)))
        outputs[t] = h
    return stack(outputs, axis=1)  # type: ignore[arg-type]


def bilstm(
    x: Tensor,
    forward: Tuple[Tensor, Tensor, Tensor],
    backward: Tuple[Tensor, Tensor, Tensor],
) -> Tensor:
    """Forward and backward LSTM passes concatenated per timestep: (N, T, D) -> (N, T, 2H)."""
    if x.shape[1] < 1:
        raise ShapeError("BiLSTM needs at least one timestep")
    return concat([lstm(x, *forward), lstm(x, *backward, reverse=True)], axis=-1)


def self_attention(h: Tensor, w: Tensor, b: Tensor, context: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Context-vector attention pooling.

    u_t = tanh(W h_t + b), score_t = u_t . context, alpha = softmax(score), out = sum alpha_t h_t

    Returns:
        Pooled vectors (N, D) and attention weights (N, T)
    """
    n, steps, _ = h.shape
    u = tanh(dense(h, w, b))
    scores = reshape(matmul(u, reshape(context, (-1, 1))), (n, steps))
    alpha = softmax(scores, axis=1)
    pooled = reduce_sum(mul(h, reshape(alpha, (n, steps, 1))), axis=1)
    return pooled, alpha


def weighted_cross_entropy(
    logits: Tensor, labels: Union[int, Sequence[int], np.ndarray], class_weights: np.ndarray
) -> Tensor:
    """
    Mean over the batch of -w[label] * log softmax(logits)[label].

    A single example may be given as logits of shape (K,) and an integer label.

    Raises:
        InvalidInput: If a label is out of range or a weight isn't positive
    """
    z = logits.data.reshape(-1, logits.shape[-1])
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    weights = np.asarray(class_weights, dtype=np.float64)
    if labels.shape != (n,):
        raise ShapeError(f"Got {labels.size} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidInput(f"Label out of range [0, {k}): {labels.tolist()}")
    if weights.shape != (k,) or np.any(weights <= 0):
        raise InvalidInput(f"Class weights must be {k} positive values")
    logp = log_softmax(z, axis=1)
    rows = np.arange(n)
    w = weights[labels]
    loss = -(w * logp[rows, labels]).mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= (w / n)[:, None]
        logits.accumulate((g * d).reshape(logits.shape))

    return _result(np.asarray(loss), (logits,), backward)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    n_coords: int = 100,
    eps: float = 1e-6,
    floor: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare backpropagated gradients with central finite differences.

    The output of `fn` is reduced with a fixed random projection to a scalar. Coordinates are
    sampled uniformly across `inputs`.

    Returns:
        Maximum of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    rng = rng or np.random.default_rng(0)
    projection = rng.standard_normal(fn().shape)

    def objective() -> float:
        return float((fn().data * projection).sum())

    for t in inputs:
        t.zero_grad()
    out = fn()
    reduce_sum(mul(out, Tensor(projection))).backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = np.array([t.size for t in inputs])
    max_error = 0.0
    for _ in range(n_coords):
        which = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        tensor = inputs[which]
        flat = int(rng.integers(tensor.size))
        idx = np.unravel_index(flat, tensor.shape)
        original = tensor.data[idx]
        tensor.data[idx] = original + eps
        plus = objective()
        tensor.data[idx] = original - eps
        minus = objective()
        tensor.data[idx] = original
        numeric = (plus - minus) / (2 * eps)
        exact = analytic[which][idx]
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        max_error = max(max_error, error)
    return max_error
