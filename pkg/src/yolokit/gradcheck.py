"""Finite-difference gradient checking for kernel compositions.

Random micro-networks (a few convs, pools, upsamples, residual adds and
concats) are run forward onto a fixed random projection; the tape's analytic
parameter gradients are then compared against central finite differences.

Two well-known caveats of finite differencing are handled explicitly:

* kinks: if a +/-h probe flips a leaky-activation sign or a pool argmax, the
  difference quotient no longer estimates the derivative. Probes whose
  routing signature changes between the two evaluations are excluded from
  the comparison (they are counted and reported).
* tiny gradients: entries are compared with a floored relative error,
  ``|a - b| / max(|a|, |b|, 0.001 * max(1, G))`` with G the largest gradient
  magnitude in the network, so roundoff noise on near-zero entries does not
  masquerade as disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops

DEFAULT_STEP = 1e-5


@dataclass
class MicroLayer:
    kind: str  # conv | maxpool | upsample | shortcut | concat
    conv: ops.ConvParams | None = None
    size: int = 0
    stride: int = 1
    pad: int = 0
    ref: int = 0  # index into the outputs list for shortcut/concat


@dataclass
class MicroNet:
    input_shape: tuple[int, int, int]
    layers: list[MicroLayer] = field(default_factory=list)

    def conv_params(self):
        return [layer.conv for layer in self.layers if layer.conv is not None]


def micro_forward(net: MicroNet, x: np.ndarray, tape: ops.GradTape | None = None):
    """Run the micro-net; returns (final output, all intermediate outputs)."""
    outs = [x]
    for layer in net.layers:
        cur = outs[-1]
        if layer.kind == "conv":
            cur = ops.conv2d_forward(cur, layer.conv, tape)
        elif layer.kind == "maxpool":
            cur = ops.maxpool2d_forward(cur, layer.size, layer.stride, layer.pad, tape)
        elif layer.kind == "upsample":
            cur = ops.upsample2x(cur, tape)
        elif layer.kind == "shortcut":
            cur = ops.shortcut_add(cur, outs[layer.ref], tape)
        elif layer.kind == "concat":
            cur = ops.concat_channels([cur, outs[layer.ref]], tape)
        outs.append(cur)
    return outs[-1], outs


def _routing_signature(net: MicroNet, outs: list[np.ndarray]):
    """Discrete decisions the forward pass made: leaky signs, pool argmaxes."""
    signature = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv" and layer.conv.activation == "leaky":
            signature.append(outs[i + 1] >= 0)
        elif layer.kind == "maxpool":
            src, k, s, pad = outs[i], layer.size, layer.stride, layer.pad
            if pad:
                padded = np.full(
                    (src.shape[0], src.shape[1] + 2 * pad, src.shape[2] + 2 * pad),
                    -np.inf,
                    dtype=src.dtype,
                )
                padded[:, pad : pad + src.shape[1], pad : pad + src.shape[2]] = src
            else:
                padded = src
            windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::s, ::s]
            signature.append(windows.reshape(*windows.shape[:3], -1).argmax(axis=3))
    return signature


def _signatures_equal(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def random_micro_net(rng: np.random.Generator, max_layers: int = 5) -> tuple[MicroNet, np.ndarray]:
    """Build a random <=max_layers kernel composition plus a matching input."""
    c = int(rng.integers(2, 5))
    side = int(rng.integers(6, 11))
    net = MicroNet(input_shape=(c, side, side))
    x = rng.uniform(-1.0, 1.0, size=net.input_shape)

    shapes = [net.input_shape]
    n_layers = int(rng.integers(2, max_layers + 1))
    for layer_index in range(n_layers):
        cur_c, cur_h, cur_w = shapes[-1]
        choices = ["conv", "conv", "conv"]
        if cur_h >= 3 and cur_w >= 3:
            choices.append("maxpool")
        if cur_h <= 12:
            choices.append("upsample")
        same_shape = [i for i, s in enumerate(shapes[:-1]) if s == shapes[-1]]
        if same_shape:
            choices.append("shortcut")
        same_spatial = [i for i, s in enumerate(shapes[:-1]) if s[1:] == shapes[-1][1:]]
        if same_spatial:
            choices.append("concat")
        # always have at least one parameterized layer to check
        kind = "conv" if layer_index == 0 else choices[int(rng.integers(len(choices)))]

        if kind == "conv":
            filters = int(rng.integers(2, 6))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2])) if min(cur_h, cur_w) >= 4 else 1
            activation = str(rng.choice(["linear", "leaky", "leaky", "sigmoid"]))
            bn = bool(rng.integers(2))
            p = ops.ConvParams(filters, k, stride, bn, activation)
            fan_in = cur_c * k * k
            p.weights = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(filters, cur_c, k, k))
            if bn:
                p.bn_gamma = rng.uniform(0.5, 1.5, filters)
                p.bn_beta = rng.normal(0.0, 0.3, filters)
                p.bn_mean = rng.normal(0.0, 0.3, filters)
                p.bn_var = rng.uniform(0.5, 2.0, filters)
            else:
                p.biases = rng.normal(0.0, 0.3, filters)
            net.layers.append(MicroLayer("conv", conv=p))
            pad = (k - 1) // 2
            shapes.append(
                (filters, (cur_h + 2 * pad - k) // stride + 1, (cur_w + 2 * pad - k) // stride + 1)
            )
        elif kind == "maxpool":
            k = int(rng.choice([2, 3]))
            stride = int(rng.choice([1, 2]))
            pad = (k - 1) // 2
            net.layers.append(MicroLayer("maxpool", size=k, stride=stride, pad=pad))
            shapes.append(
                (cur_c, (cur_h + 2 * pad - k) // stride + 1, (cur_w + 2 * pad - k) // stride + 1)
            )
        elif kind == "upsample":
            net.layers.append(MicroLayer("upsample"))
            shapes.append((cur_c, 2 * cur_h, 2 * cur_w))
        elif kind == "shortcut":
            ref = int(rng.choice(same_shape))
            net.layers.append(MicroLayer("shortcut", ref=ref))
            shapes.append(shapes[-1])
        else:
            ref = int(rng.choice(same_spatial))
            net.layers.append(MicroLayer("concat", ref=ref))
            shapes.append((cur_c + shapes[ref][0], cur_h, cur_w))
    return net, x


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # probes excluded because they crossed a kink


def check_micro_net(net: MicroNet, x: np.ndarray, rng: np.random.Generator,
                    step: float = DEFAULT_STEP, fault: float = 0.0) -> GradCheckResult:
    """Compare tape gradients of sum(projection * output) against central FD."""
    for p in net.conv_params():
        p.zero_grads()
    tape = ops.GradTape()
    out, _ = micro_forward(net, x, tape)
    projection = rng.uniform(-1.0, 1.0, size=out.shape)
    tape.backward([(out, projection)])

    analytic_arrays = []
    for p in net.conv_params():
        analytic_arrays.extend(grad for _, _, grad in p.learnable())
    if fault:
        target = analytic_arrays[0].ravel()
        worst = int(np.argmax(np.abs(target)))
        target[worst] += fault * (1.0 + abs(target[worst]))

    def objective():
        result, outs = micro_forward(net, x)
        return float(np.sum(result * projection)), _routing_signature(net, outs)

    analytic_flat, numeric_flat, valid_flat = [], [], []
    skipped = 0
    for p in net.conv_params():
        for _name, value, grad in p.learnable():
            flat_value = value.ravel()
            fd = np.zeros(flat_value.size)
            valid = np.ones(flat_value.size, dtype=bool)
            for idx in range(flat_value.size):
                orig = flat_value[idx]
                flat_value[idx] = orig + step
                f_plus, sig_plus = objective()
                flat_value[idx] = orig - step
                f_minus, sig_minus = objective()
                flat_value[idx] = orig
                fd[idx] = (f_plus - f_minus) / (2.0 * step)
                if not _signatures_equal(sig_plus, sig_minus):
                    valid[idx] = False
                    skipped += 1
            analytic_flat.append(grad.ravel().copy())
            numeric_flat.append(fd)
            valid_flat.append(valid)

    analytic = np.concatenate(analytic_flat)
    numeric = np.concatenate(numeric_flat)
    valid = np.concatenate(valid_flat)
    rel = relative_errors(analytic, numeric)
    max_err = float(rel[valid].max()) if valid.any() else 0.0
    return GradCheckResult(max_err, int(valid.sum()), skipped)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise floored relative error (see module docstring)."""
    scale = float(max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)))
    floor = 1e-3 * max(1.0, scale)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference(fn, array: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. every entry."""
    flat = array.ravel()
    grad = np.zeros(flat.size)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = fn()
        flat[idx] = orig - step
        f_minus = fn()
        flat[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(array.shape)


def run_gradient_fidelity(seed: int = 0, num_nets: int = 20,
                          step: float = DEFAULT_STEP, fault: float = 0.0) -> GradCheckResult:
    """Gradient-check ``num_nets`` random micro-networks; aggregate the worst."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for index in range(num_nets):
        net, x = random_micro_net(rng)
        result = check_micro_net(net, x, rng, step, fault=fault if index == 0 else 0.0)
        worst = max(worst, result.max_rel_error)
        checked += result.checked
        skipped += result.skipped
    return GradCheckResult(worst, checked, skipped)
