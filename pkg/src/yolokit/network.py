"""Executable networks: a validated graph bound to parameters, plus forward.

A :class:`Network` owns one :class:`~yolokit.cfg.ModelGraph` and a ConvParams
slot per layer (None for parameter-free layers). Parameters are attached by
the weights module (file load or seeded random init); running ``forward`` on
an unparameterized network is a usage error. Inference is read-only, so one
parameterized network can serve concurrent forward passes; each call builds
its own activations and (optionally) its own tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .cfg import ModelGraph, resolve_ref, shape_check
from .errors import ShapeError, UsageError


@dataclass
class HeadOutput:
    """Raw prediction map of one detection scale.

    ``raw`` is (3*(5+C)) x S_rows x S_cols; ``stride`` is input pixels per
    cell; ``anchors`` are the three (w, h) pixel priors for this scale.
    """

    grid: tuple[int, int]
    stride: int
    raw: np.ndarray
    anchors: list[tuple[float, float]]
    num_classes: int


class Network:
    """A graph plus per-convolution parameters, executable on CHW images."""

    def __init__(self, graph: ModelGraph, dtype=np.float64):
        shape_check(graph, graph.input_width, graph.input_height)
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.seen = 0
        self.params: list[ops.ConvParams | None] = []
        self.conv_in_channels: dict[int, int] = {}
        channels = graph.input_channels
        trace = [channels]
        for i, layer in enumerate(graph.layers):
            a = layer.attrs
            if layer.kind == "convolutional":
                p = ops.ConvParams(
                    filters=a["filters"],
                    size=a["size"],
                    stride=a["stride"],
                    has_batchnorm=bool(a["batch_normalize"]),
                    activation=a["activation"],
                )
                self.conv_in_channels[i] = channels
                self.params.append(p)
                channels = a["filters"]
            else:
                self.params.append(None)
                if layer.kind == "route":
                    channels = sum(trace[resolve_ref(i, r) + 1] for r in a["layers"])
            trace.append(channels)

    @property
    def parameterized(self) -> bool:
        return all(p is None or p.parameterized for p in self.params)

    def conv_layers(self):
        """Yield (layer_index, ConvParams) for every convolution, in order."""
        for i, p in enumerate(self.params):
            if p is not None:
                yield i, p

    def zero_grads(self) -> None:
        for _, p in self.conv_layers():
            p.zero_grads()

    def forward(self, image: np.ndarray, tape: ops.GradTape | None = None) -> list[HeadOutput]:
        """Run the full graph on one image, returning heads coarse to fine."""
        if not self.parameterized:
            raise UsageError("network has no parameters; load weights or random-init first")
        image = ops.check_tensor(image, rank=3, name="image")
        if image.shape[0] != self.graph.input_channels:
            raise ShapeError(
                f"image has {image.shape[0]} channels, net expects {self.graph.input_channels}"
            )
        _, in_h, in_w = image.shape
        if in_h % 32 or in_w % 32:
            raise ShapeError(f"input {in_h}x{in_w} must be divisible by 32")
        image = np.ascontiguousarray(image, dtype=self.dtype)

        outputs: list[np.ndarray] = []
        heads: list[HeadOutput] = []
        x = image
        for i, layer in enumerate(self.graph.layers):
            a = layer.attrs
            if layer.kind == "convolutional":
                x = ops.conv2d_forward(x, self.params[i], tape)
            elif layer.kind == "maxpool":
                x = ops.maxpool2d_forward(x, a["size"], a["stride"], a["padding"], tape)
            elif layer.kind == "upsample":
                x = ops.upsample2x(x, tape)
            elif layer.kind == "route":
                inputs = [outputs[resolve_ref(i, r)] for r in a["layers"]]
                x = ops.concat_channels(inputs, tape)
            elif layer.kind == "shortcut":
                x = ops.shortcut_add(x, outputs[resolve_ref(i, a["from"])], tape)
            elif layer.kind == "yolo":
                grid_h, grid_w = x.shape[1], x.shape[2]
                stride = in_h // grid_h
                anchors = [
                    (float(a["anchors"][2 * m]), float(a["anchors"][2 * m + 1]))
                    for m in a["mask"]
                ]
                heads.append(
                    HeadOutput(
                        grid=(grid_h, grid_w),
                        stride=stride,
                        raw=x,
                        anchors=anchors,
                        num_classes=a["classes"],
                    )
                )
            outputs.append(x)
        heads.sort(key=lambda h: -h.stride)
        return heads

    def backward(self, tape: ops.GradTape, head_grads) -> None:
        """Push per-head raw gradients back to the parameter buffers.

        ``head_grads`` pairs each HeadOutput (or its raw tensor) with a
        gradient array of the same shape. Call ``zero_grads`` first unless
        accumulation across images is intended.
        """
        seeds = []
        for head, grad in head_grads:
            raw = head.raw if isinstance(head, HeadOutput) else head
            seeds.append((raw, grad))
        tape.backward(seeds)

    def count_parameters(self) -> tuple[list[tuple[int, int]], int]:
        """Per-convolution (layer_index, float_count) and the total.

        Counts match the serialized layout: 4 per-filter vectors with
        batch-norm (or 1 bias vector without), plus the weight block.
        """
        per_layer = []
        total = 0
        for i, p in self.conv_layers():
            cin = self.conv_in_channels[i]
            per_filter = 4 if p.has_batchnorm else 1
            n = per_filter * p.filters + p.filters * cin * p.size * p.size
            per_layer.append((i, n))
            total += n
        return per_layer, total


def spp_forward(x: np.ndarray, tape: ops.GradTape | None = None) -> np.ndarray:
    """Pyramid-pool a feature map: concat of identity and 5/9/13 max pools.

    All three pools use stride 1 with same padding, so a C x H x W input
    yields 4C x H x W for any H, W >= 1.
    """
    branches = [
        x,
        ops.maxpool2d_forward(x, 5, 1, 2, tape),
        ops.maxpool2d_forward(x, 9, 1, 4, tape),
        ops.maxpool2d_forward(x, 13, 1, 6, tape),
    ]
    return ops.concat_channels(branches, tape)
