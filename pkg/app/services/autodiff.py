"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a `Tensor` holding its parents and a
closure that pushes the upstream gradient into them. `Tensor.backward` builds a
`Tape` (topological order of the graph below the root) and walks it once in
reverse. Arrays keep their dtype: float32 for training, float64 for gradient
checks.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.models.training import AdamState
from app.utils.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Forward passes inside this block record no graph"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), op: str = ""):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple["Tensor", ...] = tuple(parents)
        self.op = op
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None):
        Tape.from_graph(self).backward(self, grad)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return total(self)


class Parameter(Tensor):
    """Trainable leaf; `decay` marks tensors that receive L2 weight decay"""

    def __init__(self, data, name: str = "", decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.decay = decay


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, parents=parents, op=op)
        out._backward = backward
        return out
    return Tensor(data, op=op)


class Tape:
    """Operations below a root in topological order (every input before its consumer)"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_graph(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor, grad: Optional[np.ndarray] = None):
        if not root.requires_grad:
            raise ShapeError("backward called on a tensor that does not require gradients")
        if grad is None:
            if root.data.size != 1:
                raise ShapeError("implicit gradient only for scalar outputs")
            grad = np.ones_like(root.data)
        root.accumulate(np.asarray(grad, dtype=root.dtype))
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # Gradien node antara tidak dibutuhkan lagi
            node.grad = None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def total(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x.accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), "transpose", backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        x.accumulate(g * positive)

    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,), "relu", backward)


def maxpool(x: Tensor, window: Tuple[int, int] = (1, 2)) -> Tensor:
    """
    Non-overlapping max pooling over the last axis (window (1, k), stride (1, k)).
    An odd remainder is padded on the right with -inf; ties route to the first index.
    """
    if window[0] != 1 or window[1] < 1:
        raise ShapeError(f"only (1, k) pooling windows are supported, got {window}")
    k = window[1]
    length = x.shape[-1]
    remainder = (-length) % k
    padded = x.data
    if remainder:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, remainder)]
        padded = np.pad(x.data, pad, constant_values=-np.inf)
    grouped = padded.reshape(x.shape[:-1] + (padded.shape[-1] // k, k))
    index = np.argmax(grouped, axis=-1)[..., None]
    out = np.take_along_axis(grouped, index, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(grouped.shape, dtype=g.dtype)
        np.put_along_axis(routed, index, g[..., None], axis=-1)
        x.accumulate(routed.reshape(padded.shape)[..., :length])

    return _result(out, (x,), "maxpool", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), "softmax", backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [..., F] @ weight [F, K] + bias [K]"""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(x.ndim - 1))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(np.tensordot(x.data, g, axes=(lead, lead)))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=lead))

    return _result(out, parents, "linear", backward)


# ---------------------------------------------------------------------------
# Convolution and normalization
# ---------------------------------------------------------------------------

def _conv_padding(padding, kh: int, kw: int) -> Tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernels, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    ph, pw = padding
    return int(ph), int(pw)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: Tuple[int, int] = (1, 1), padding: Union[str, Tuple[int, int]] = "same") -> Tensor:
    """
    Cross-correlation of x [B, Cin, H, W] with kernels [Cout, Cin, kh, kw].
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape} and {kernels.shape}")
    batch, c_in, height, width = x.shape
    c_out, k_in, kh, kw = kernels.shape
    if c_in != k_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernels expect {k_in}")
    ph, pw = _conv_padding(padding, kh, kw)
    sh, sw = stride
    if kh > height + 2 * ph or kw > width + 2 * pw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {height + 2 * ph}x{width + 2 * pw}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        if kernels.requires_grad:
            kernels.accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            grad_padded = np.zeros(padded.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    contribution = np.tensordot(g, kernels.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += contribution.transpose(0, 3, 1, 2)
            x.accumulate(grad_padded[:, :, ph:ph + height, pw:pw + width])

    return _result(out, parents, "conv2d", backward)


class BatchNormState:
    """Running statistics of one batch-normalization layer"""

    def __init__(self, n_features: int, dtype=np.float32, momentum: float = BATCHNORM_MOMENTUM,
                 eps: float = BATCHNORM_EPS):
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """
    Per-feature (axis 1) normalization. Training mode uses biased batch statistics
    and updates the running mean and unbiased running variance.
    """
    axes = tuple(i for i in range(x.ndim) if i != 1)
    view = [1] * x.ndim
    view[1] = x.shape[1]
    g_view = gamma.data.reshape(view)

    if training:
        count = x.data.size // x.shape[1]
        if count < 2:
            raise ShapeError(f"batchnorm needs at least 2 values per feature in training, got {count}")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean.reshape(-1)).astype(state.running_mean.dtype)
        unbiased = var.reshape(-1) * count / (count - 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.reshape(view).astype(x.dtype)
        var = state.running_var.reshape(view).astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.data - mean) * inv_std
    out = (g_view * x_hat + beta.data.reshape(view)).astype(x.dtype)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * x_hat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            d_hat = g * g_view
            if training:
                dx = inv_std * (
                    d_hat - d_hat.mean(axis=axes, keepdims=True)
                    - x_hat * (d_hat * x_hat).mean(axis=axes, keepdims=True)
                )
            else:
                dx = d_hat * inv_std
            x.accumulate(dx.astype(x.dtype))

    return _result(out, (x, gamma, beta), "batchnorm", backward)


# ---------------------------------------------------------------------------
# Gated recurrent unit
# ---------------------------------------------------------------------------

def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_forward(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    """
    One direction over x [B, T, F]. Gate columns are ordered (z, r, n);
    the reset gate scales h before the candidate's recurrent matrix.
    """
    batch, steps, _ = x.shape
    hidden = wh.shape[0]
    w_zr, w_n = wh[:, :2 * hidden], wh[:, 2 * hidden:]
    ax = x @ wx + b
    h = np.zeros((batch, hidden), dtype=x.dtype)
    hs = np.empty((batch, steps, hidden), dtype=x.dtype)
    cache = []
    for t in range(steps):
        a = ax[:, t]
        zr = _sigmoid(a[:, :2 * hidden] + h @ w_zr)
        z, r = zr[:, :hidden], zr[:, hidden:]
        rh = r * h
        n = np.tanh(a[:, 2 * hidden:] + rh @ w_n)
        h_next = z * h + (1 - z) * n
        cache.append((h, z, r, n, rh))
        hs[:, t] = h_next
        h = h_next
    return hs, cache


def _gru_backward(g_hs: np.ndarray, cache, x: np.ndarray, wx: np.ndarray, wh: np.ndarray):
    batch, steps, _ = x.shape
    hidden = wh.shape[0]
    w_z, w_r, w_n = wh[:, :hidden], wh[:, hidden:2 * hidden], wh[:, 2 * hidden:]
    d_wh = np.zeros_like(wh)
    d_ax = np.empty((batch, steps, 3 * hidden), dtype=g_hs.dtype)
    dh_next = np.zeros((batch, hidden), dtype=g_hs.dtype)
    for t in reversed(range(steps)):
        h_prev, z, r, n, rh = cache[t]
        dh = g_hs[:, t] + dh_next
        dz = dh * (h_prev - n)
        dn = dh * (1 - z)
        dh_prev = dh * z
        da_n = dn * (1 - n * n)
        d_wh[:, 2 * hidden:] += rh.T @ da_n
        d_rh = da_n @ w_n.T
        dr = d_rh * h_prev
        dh_prev += d_rh * r
        da_z = dz * z * (1 - z)
        da_r = dr * r * (1 - r)
        d_wh[:, :hidden] += h_prev.T @ da_z
        d_wh[:, hidden:2 * hidden] += h_prev.T @ da_r
        dh_prev += da_z @ w_z.T + da_r @ w_r.T
        d_ax[:, t, :hidden] = da_z
        d_ax[:, t, hidden:2 * hidden] = da_r
        d_ax[:, t, 2 * hidden:] = da_n
        dh_next = dh_prev
    dx = d_ax @ wx.T
    d_wx = np.tensordot(x, d_ax, axes=([0, 1], [0, 1]))
    d_b = d_ax.sum(axis=(0, 1))
    return dx, d_wx, d_wh, d_b


def gru_bidirectional(x: Tensor, forward_params: Sequence[Tensor], backward_params: Sequence[Tensor]) -> Tensor:
    """
    Bidirectional GRU over x [B, T, F]; each direction takes (Wx [F, 3H], Wh [H, 3H], b [3H]).
    Returns [B, T, 2H] with forward-time features first. Initial states are zero.
    """
    if x.ndim != 3:
        raise ShapeError(f"gru_bidirectional expects [B, T, F], got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("gru_bidirectional needs at least one time step")
    wx_f, wh_f, b_f = forward_params
    wx_b, wh_b, b_b = backward_params
    hidden = wh_f.shape[0]
    for wx, wh, b in (forward_params, backward_params):
        if wx.shape != (x.shape[2], 3 * hidden) or wh.shape != (hidden, 3 * hidden) or b.shape != (3 * hidden,):
            raise ShapeError(f"GRU weights {wx.shape}, {wh.shape}, {b.shape} inconsistent with input {x.shape}")

    x_rev = x.data[:, ::-1]
    hs_f, cache_f = _gru_forward(x.data, wx_f.data, wh_f.data, b_f.data)
    hs_r, cache_r = _gru_forward(x_rev, wx_b.data, wh_b.data, b_b.data)
    out = np.concatenate([hs_f, hs_r[:, ::-1]], axis=-1)

    def backward(g):
        dx_f, dwx_f, dwh_f, db_f = _gru_backward(g[..., :hidden], cache_f, x.data, wx_f.data, wh_f.data)
        g_rev = np.ascontiguousarray(g[:, ::-1, hidden:])
        dx_r, dwx_b, dwh_b, db_b = _gru_backward(g_rev, cache_r, x_rev, wx_b.data, wh_b.data)
        if x.requires_grad:
            x.accumulate(dx_f + dx_r[:, ::-1])
        for param, grad in zip((wx_f, wh_f, b_f, wx_b, wh_b, b_b), (dwx_f, dwh_f, db_f, dwx_b, dwh_b, db_b)):
            if param.requires_grad:
                param.accumulate(grad)

    parents = (x, wx_f, wh_f, b_f, wx_b, wh_b, b_b)
    return _result(out, parents, "gru_bidirectional", backward)


# ---------------------------------------------------------------------------
# Loss support
# ---------------------------------------------------------------------------

def time_average(y: Tensor, window: int) -> Tensor:
    """Mean over consecutive, non-overlapping groups of `window` columns along the last axis"""
    columns = y.shape[-1]
    if window < 1 or columns % window:
        raise ShapeError(f"window {window} does not divide {columns} columns")
    grouped = y.data.reshape(y.shape[:-1] + (columns // window, window))
    out = grouped.mean(axis=-1)

    def backward(g):
        y.accumulate(np.repeat(g / window, window, axis=-1))

    return _result(out, (y,), "time_average", backward)


def cross_entropy(probabilities: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    -sum over unmasked columns of sum_k t_k log max(p_k, 1e-12).
    probabilities and targets are [B, K, N]; mask is [B, N].
    """
    if probabilities.shape != targets.shape:
        raise ShapeError(f"probabilities {probabilities.shape} and targets {targets.shape} differ")
    weight = targets * mask[:, None, :]
    if not mask.any():
        raise DataError("every window is masked; nothing to score")
    p = probabilities.data
    floored = np.maximum(p, LOG_FLOOR)
    value = -(weight * np.log(floored)).sum()

    def backward(g):
        probabilities.accumulate((-g * weight / floored * (p >= LOG_FLOOR)).astype(probabilities.dtype))

    return _result(np.asarray(value, dtype=probabilities.dtype), (probabilities,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------

def compute_fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    """Linear weights are [fan_in, fan_out]; conv kernels [Cout, Cin, kh, kw] include the receptive field"""
    if len(shape) == 0:
        raise ShapeError("cannot derive fans from a scalar shape")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    if fan_in <= 0 or fan_out <= 0:
        raise ShapeError(f"zero fan for shape {shape}")
    return int(fan_in), int(fan_out)


def glorot_uniform_init(shape: Tuple[int, ...], rng: np.random.Generator, dtype=np.float32,
                        name: str = "") -> Parameter:
    fan_in, fan_out = compute_fans(tuple(shape))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name, decay=True)


def zeros_init(shape: Tuple[int, ...], dtype=np.float32, name: str = "") -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name=name, decay=False)


def ones_init(shape: Tuple[int, ...], dtype=np.float32, name: str = "") -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype), name=name, decay=False)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, in place. When weight_decay > 0, weight_decay * theta
    is added to the gradient of decayed parameters before the moment updates.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None and grad.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter {param.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.t
    correction2 = 1 - b2 ** state.t
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else grad.astype(param.dtype)
        if state.weight_decay > 0 and getattr(param, "decay", True):
            grad = grad + state.weight_decay * param.data
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.shape or v.shape != param.shape:
            raise ShapeError(f"optimizer moments for '{name}' do not match parameter shape {param.shape}")
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return state
