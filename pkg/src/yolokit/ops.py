"""Dense CHW tensors and forward/backward compute kernels.

Feature maps are numpy arrays in channels x height x width layout, float64
for verification work and float32 when speed matters. Kernels are pure
functions of their inputs; passing a :class:`GradTape` makes them record the
closures needed to run the matching backward pass later. Parameter gradients
accumulate into buffers on :class:`ConvParams`, which makes multi-pass
gradient accumulation (emulated batching) a no-op to implement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError, UsageError

LEAKY_SLOPE = 0.1
BN_EPSILON = 1e-5
ACTIVATIONS = ("linear", "leaky", "sigmoid")

_FLOAT_DTYPES = (np.float32, np.float64)


def check_tensor(x, rank: int | None = None, name: str = "tensor") -> np.ndarray:
    """Validate a dense real tensor: float dtype, rank <= 4, all extents >= 1."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name}: expected a numpy array, got {type(x).__name__}")
    if x.dtype.type not in _FLOAT_DTYPES:
        raise ShapeError(f"{name}: expected float32/float64 data, got {x.dtype}")
    if x.ndim < 1 or x.ndim > 4:
        raise ShapeError(f"{name}: rank must be 1..4, got {x.ndim}")
    if any(extent < 1 for extent in x.shape):
        raise ShapeError(f"{name}: all extents must be >= 1, got shape {x.shape}")
    return x


def as_tensor(data, shape=None, dtype=np.float64) -> np.ndarray:
    """Build a validated tensor from flat or nested data, optionally reshaped."""
    arr = np.asarray(data, dtype=dtype)
    if shape is not None:
        wanted = int(np.prod(shape))
        if arr.size != wanted:
            raise ShapeError(
                f"cannot reshape {arr.size} values into shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    return check_tensor(arr)


def sigmoid(x):
    # Split by sign so large |x| never overflows exp.
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


@dataclass
class ConvParams:
    """Parameters of one convolution: weights plus optional batch-norm stats.

    Weights are laid out ``filters x in_channels x k x k``. With batch-norm the
    per-filter vectors are gamma/beta/rolling mean/rolling variance and the
    plain bias vector is unused; without batch-norm only ``biases`` applies.
    Batch-norm runs in inference mode: the rolling statistics are loaded data,
    never updated; only weights, biases and the BN affine terms carry
    gradients.
    """

    filters: int
    size: int
    stride: int = 1
    has_batchnorm: bool = False
    activation: str = "linear"
    weights: np.ndarray | None = None
    biases: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    g_weights: np.ndarray | None = field(default=None, repr=False)
    g_biases: np.ndarray | None = field(default=None, repr=False)
    g_gamma: np.ndarray | None = field(default=None, repr=False)
    g_beta: np.ndarray | None = field(default=None, repr=False)

    @property
    def pad(self) -> int:
        return (self.size - 1) // 2

    @property
    def in_channels(self) -> int:
        if self.weights is None:
            raise UsageError("convolution has no weights attached yet")
        return int(self.weights.shape[1])

    @property
    def parameterized(self) -> bool:
        return self.weights is not None

    def validate(self) -> None:
        if self.size < 1 or self.size % 2 == 0:
            raise ShapeError(f"conv kernel size must be odd and >= 1, got {self.size}")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.weights is None:
            return
        f, k = self.filters, self.size
        if self.weights.ndim != 4 or self.weights.shape[0] != f or self.weights.shape[2:] != (k, k):
            raise ShapeError(
                f"weights must be shaped {f} x C_in x {k} x {k}, got {self.weights.shape}"
            )
        for name in ("bn_gamma", "bn_beta", "bn_mean", "bn_var") if self.has_batchnorm else ("biases",):
            vec = getattr(self, name)
            if vec is None or vec.shape != (f,):
                raise ShapeError(f"{name} must be a length-{f} vector")
        if self.has_batchnorm and not np.all(self.bn_var > 0):
            raise ShapeError("batch-norm variances must be strictly positive")

    def zero_grads(self) -> None:
        self.g_weights = np.zeros_like(self.weights)
        if self.has_batchnorm:
            self.g_gamma = np.zeros_like(self.bn_gamma)
            self.g_beta = np.zeros_like(self.bn_beta)
        else:
            self.g_biases = np.zeros_like(self.biases)

    def learnable(self):
        """Yield (name, value, gradient) for every trainable array."""
        yield "weights", self.weights, self.g_weights
        if self.has_batchnorm:
            yield "bn_gamma", self.bn_gamma, self.g_gamma
            yield "bn_beta", self.bn_beta, self.g_beta
        else:
            yield "biases", self.biases, self.g_biases

    def param_count(self) -> int:
        """Float count as serialized: 4 or 1 per-filter vectors plus weights."""
        per_filter = 4 if self.has_batchnorm else 1
        k = self.size
        cin = self.in_channels
        return per_filter * self.filters + self.filters * cin * k * k


class GradTape:
    """Records a forward op sequence so gradients can be pushed back through it.

    The tape is single-owner: record during exactly one forward pass, then call
    :meth:`backward` with the output gradients. Input-tensor gradients are
    keyed by array identity (fetch with :meth:`grad`); parameter gradients
    accumulate directly into the ConvParams buffers.
    """

    def __init__(self):
        self._entries: list[tuple[np.ndarray, object]] = []
        self._grads: dict[int, np.ndarray] = {}

    def record(self, out: np.ndarray, backward_fn) -> None:
        self._entries.append((out, backward_fn))

    def accumulate(self, arr: np.ndarray, grad: np.ndarray) -> None:
        existing = self._grads.get(id(arr))
        if existing is None:
            self._grads[id(arr)] = grad
        else:
            existing += grad

    def grad(self, arr: np.ndarray) -> np.ndarray | None:
        """Gradient accumulated for ``arr`` during backward, or None."""
        return self._grads.get(id(arr))

    def backward(self, seeds) -> None:
        """Run the reverse pass. ``seeds`` is an iterable of (tensor, grad)."""
        if not self._entries:
            raise TapeError("backward called on a tape with no recorded forward ops")
        recorded = {id(out) for out, _ in self._entries}
        seeded = False
        for arr, grad in seeds:
            if id(arr) not in recorded:
                raise TapeError("seed tensor was not produced by this tape's forward pass")
            grad = np.asarray(grad, dtype=arr.dtype)
            if grad.shape != arr.shape:
                raise ShapeError(
                    f"seed gradient shape {grad.shape} does not match output {arr.shape}"
                )
            self.accumulate(arr, grad.copy())
            seeded = True
        if not seeded:
            raise TapeError("backward needs at least one (output, gradient) seed")
        for out, fn in reversed(self._entries):
            gy = self._grads.get(id(out))
            if gy is None:
                continue
            fn(gy)


def _apply_activation(z, activation):
    if activation == "leaky":
        return leaky_relu(z)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(gy, z, y, activation):
    if activation == "leaky":
        return gy * np.where(z >= 0, 1.0, LEAKY_SLOPE)
    if activation == "sigmoid":
        return gy * y * (1.0 - y)
    return gy


def _im2col(x_padded, k, stride, out_h, out_w):
    # (C, Hp, Wp) -> (out_h*out_w, C*k*k) with rows in spatial scan order
    windows = sliding_window_view(x_padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, -1)
    return np.ascontiguousarray(cols)


def conv2d_forward(x: np.ndarray, params: ConvParams, tape: GradTape | None = None) -> np.ndarray:
    """Same-padded 2D convolution with optional batch-norm and activation.

    Output spatial extent is ``ceil(H / stride)`` per axis. Raises ShapeError
    when the input channel count does not match the weights.
    """
    x = check_tensor(x, rank=3, name="conv input")
    p = params
    p.validate()
    if not p.parameterized:
        raise UsageError("convolution has no weights attached yet")
    cin = p.weights.shape[1]
    if x.shape[0] != cin:
        raise ShapeError(f"conv weights expect {cin} input channels, input has {x.shape[0]}")
    k, s, pad = p.size, p.stride, p.pad
    _, h, w = x.shape
    out_h = (h + 2 * pad - k) // s + 1
    out_w = (w + 2 * pad - k) // s + 1

    w_mat = p.weights.reshape(p.filters, -1)
    if k == 1 and s == 1:
        x_padded = x
        cols = np.ascontiguousarray(x.reshape(cin, -1).T)
    else:
        x_padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(x_padded, k, s, out_h, out_w)
    z = (cols @ w_mat.T).T.reshape(p.filters, out_h, out_w)

    if p.has_batchnorm:
        inv_std = 1.0 / np.sqrt(p.bn_var + BN_EPSILON)
        x_hat = (z - p.bn_mean[:, None, None]) * inv_std[:, None, None]
        z = p.bn_gamma[:, None, None] * x_hat + p.bn_beta[:, None, None]
    else:
        x_hat = None
        z = z + p.biases[:, None, None]
    y = _apply_activation(z, p.activation)

    if tape is not None:
        pre_act = z

        def backward(gy):
            g = _activation_grad(gy, pre_act, y, p.activation)
            if p.has_batchnorm:
                p.g_beta += g.sum(axis=(1, 2))
                p.g_gamma += (g * x_hat).sum(axis=(1, 2))
                inv = 1.0 / np.sqrt(p.bn_var + BN_EPSILON)
                gz = g * (p.bn_gamma * inv)[:, None, None]
            else:
                p.g_biases += g.sum(axis=(1, 2))
                gz = g
            gz_flat = gz.reshape(p.filters, -1)
            p.g_weights += (gz_flat @ cols).reshape(p.weights.shape)
            gcols = gz_flat.T @ w_mat
            if k == 1 and s == 1:
                gx = np.ascontiguousarray(gcols.T).reshape(x.shape)
            else:
                gxp = np.zeros_like(x_padded)
                gcols_r = gcols.reshape(out_h, out_w, cin, k, k)
                for ki in range(k):
                    for kj in range(k):
                        gxp[:, ki : ki + s * (out_h - 1) + 1 : s,
                            kj : kj + s * (out_w - 1) + 1 : s] += gcols_r[:, :, :, ki, kj].transpose(2, 0, 1)
                gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
                gx = np.ascontiguousarray(gx)
            tape.accumulate(x, gx)

        tape.record(y, backward)
    return y


def maxpool2d_forward(x: np.ndarray, size: int, stride: int, pad: int,
                      tape: GradTape | None = None) -> np.ndarray:
    """Max pooling with symmetric padding; padded cells are -inf, never selected.

    Output extent is ``floor((H + 2*pad - size)/stride) + 1`` per spatial axis.
    """
    x = check_tensor(x, rank=3, name="maxpool input")
    if size < 1 or stride < 1:
        raise ShapeError(f"pool size/stride must be >= 1, got {size}/{stride}")
    if pad < 0 or pad > size - 1:
        raise ShapeError(f"pool padding must satisfy 0 <= pad <= size-1, got {pad}")
    c, h, w = x.shape
    if h + 2 * pad < size or w + 2 * pad < size:
        raise ShapeError(
            f"pool window {size} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    out_h = (h + 2 * pad - size) // stride + 1
    out_w = (w + 2 * pad - size) // stride + 1
    if pad:
        x_padded = np.full((c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
        x_padded[:, pad : pad + h, pad : pad + w] = x
    else:
        x_padded = x
    windows = sliding_window_view(x_padded, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    flat = windows.reshape(c, out_h, out_w, size * size)
    arg = flat.argmax(axis=3)
    y = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]
    y = np.ascontiguousarray(y)

    if tape is not None:

        def backward(gy):
            gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            ci, ii, jj = np.indices((c, out_h, out_w), sparse=False)
            ri = ii * stride + arg // size
            cj = jj * stride + arg % size
            np.add.at(gxp, (ci, ri, cj), gy)
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
            tape.accumulate(x, np.ascontiguousarray(gx))

        tape.record(y, backward)
    return y


def upsample2x(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Nearest-neighbor 2x upsampling: each value becomes a 2x2 block."""
    x = check_tensor(x, rank=3, name="upsample input")
    y = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    if tape is not None:
        c, h, w = x.shape

        def backward(gy):
            tape.accumulate(x, gy.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

        tape.record(y, backward)
    return y


def concat_channels(inputs, tape: GradTape | None = None) -> np.ndarray:
    """Concatenate CHW tensors along channels; spatial shapes must agree."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    xs = [check_tensor(x, rank=3, name=f"concat input {i}") for i, x in enumerate(inputs)]
    spatial = xs[0].shape[1:]
    for i, x in enumerate(xs[1:], start=1):
        if x.shape[1:] != spatial:
            raise ShapeError(
                f"concat input {i} spatial shape {x.shape[1:]} != {spatial}"
            )
    y = np.concatenate(xs, axis=0)
    if tape is not None:
        splits = [x.shape[0] for x in xs]

        def backward(gy):
            start = 0
            for x, nch in zip(xs, splits):
                tape.accumulate(x, np.ascontiguousarray(gy[start : start + nch]))
                start += nch

        tape.record(y, backward)
    return y


def shortcut_add(x: np.ndarray, y: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Elementwise residual add of two identically shaped tensors."""
    x = check_tensor(x, rank=3, name="shortcut input")
    y = check_tensor(y, rank=3, name="shortcut skip")
    if x.shape != y.shape:
        raise ShapeError(f"shortcut shapes differ: {x.shape} vs {y.shape}")
    out = x + y
    if tape is not None:

        def backward(gy):
            tape.accumulate(x, gy.copy())
            tape.accumulate(y, gy.copy())

        tape.record(out, backward)
    return out


def backward(tape: GradTape, seeds) -> None:
    """Run the reverse pass over a recorded tape. See :meth:`GradTape.backward`."""
    tape.backward(seeds)
