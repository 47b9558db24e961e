"""Training loss, anchor assignment, SGD with momentum, and a toy trainer.

The loss is the sum of three squared-error terms over the head grids:
coordinate error on responsible anchors (centers in cell units, sizes via
square roots of image fractions), objectness error (target 1 on responsible
anchors, 0 on non-responsible ones outside the ignore set), and per-class
probability error on responsible anchors. Masks are computed once during
assignment and held fixed, so the loss is a smooth function of the raw head
values and finite-difference checks apply everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cfg import ModelGraph, parse_cfg
from .errors import NumericError, UsageError, ValidationError
from .evaluation import GroundTruthBox
from .detect import Box
from .network import HeadOutput, Network
from .ops import GradTape, sigmoid
from .weights import random_init


@dataclass
class LossWeights:
    """Nonnegative multipliers for the three loss terms (and no-object belief)."""

    coord: float = 5.0
    iou: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0

    def validate(self):
        if min(self.coord, self.iou, self.noobj, self.cls) < 0:
            raise ValidationError("loss weights must be nonnegative")


@dataclass
class HeadTargets:
    """Per-(anchor, row, col) masks and encoded targets for one head."""

    obj_mask: np.ndarray     # bool (3, S, S): responsible slots
    ignore_mask: np.ndarray  # bool (3, S, S): excluded from the no-object term
    tx: np.ndarray           # target center offsets within the cell, [0, 1)
    ty: np.ndarray
    tw: np.ndarray           # target sizes as image fractions
    th: np.ndarray
    obj_target: np.ndarray   # objectness target (1 on responsible slots)
    cls_index: np.ndarray    # int (3, S, S), -1 where not responsible


@dataclass
class TargetAssignment:
    heads: list[HeadTargets]


@dataclass
class LossBreakdown:
    total: float
    coord: float
    iou: float
    cls: float


def _shape_iou(w1, h1, w2, h2):
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def _predicted_boxes(head: HeadOutput):
    """Decode a head's raw map into per-slot (x, y, w, h) arrays, input pixels."""
    rows, cols = head.grid
    raw = head.raw.reshape(3, 5 + head.num_classes, rows, cols)
    col_grid = np.arange(cols)[None, None, :]
    row_grid = np.arange(rows)[None, :, None]
    px = (sigmoid(raw[:, 0]) + col_grid) * head.stride
    py = (sigmoid(raw[:, 1]) + row_grid) * head.stride
    aw = np.array([a[0] for a in head.anchors])[:, None, None]
    ah = np.array([a[1] for a in head.anchors])[:, None, None]
    pw = aw * np.exp(raw[:, 2])
    ph = ah * np.exp(raw[:, 3])
    return px, py, pw, ph


def assign_targets(ground_truth, heads: list[HeadOutput],
                   ignore_iou: float = 0.5) -> TargetAssignment:
    """Assign each box to its best-shaped anchor and build the loss masks.

    Boxes must be in network-input pixel coordinates. Each non-ignored box
    goes to the (head, cell, anchor) whose anchor has the highest IoU with
    the box when both are centered at the origin; when two boxes claim the
    same slot the first (input order) keeps it. Predicted boxes that overlap
    any ground-truth box above ``ignore_iou`` without being responsible land
    in the ignore mask and are excluded from the no-object term.
    """
    if not heads:
        raise UsageError("need at least one head to assign targets against")
    input_h = heads[0].stride * heads[0].grid[0]
    input_w = heads[0].stride * heads[0].grid[1]

    targets = []
    for head in heads:
        rows, cols = head.grid
        targets.append(
            HeadTargets(
                obj_mask=np.zeros((3, rows, cols), dtype=bool),
                ignore_mask=np.zeros((3, rows, cols), dtype=bool),
                tx=np.zeros((3, rows, cols)),
                ty=np.zeros((3, rows, cols)),
                tw=np.zeros((3, rows, cols)),
                th=np.zeros((3, rows, cols)),
                obj_target=np.zeros((3, rows, cols)),
                cls_index=np.full((3, rows, cols), -1, dtype=int),
            )
        )

    anchor_table = [
        (hi, ai, aw, ah)
        for hi, head in enumerate(heads)
        for ai, (aw, ah) in enumerate(head.anchors)
    ]
    for gt in ground_truth:
        box = gt.box
        if not (0 <= box.x <= input_w and 0 <= box.y <= input_h):
            raise ValidationError(
                f"ground-truth center ({box.x}, {box.y}) outside the "
                f"{input_w}x{input_h} input"
            )
        if gt.ignore:
            continue
        best = max(anchor_table, key=lambda t: _shape_iou(box.w, box.h, t[2], t[3]))
        hi, ai = best[0], best[1]
        head, tgt = heads[hi], targets[hi]
        rows, cols = head.grid
        col = min(int(box.x // head.stride), cols - 1)
        row = min(int(box.y // head.stride), rows - 1)
        if tgt.obj_mask[ai, row, col]:
            continue  # slot already claimed by an earlier box
        tgt.obj_mask[ai, row, col] = True
        tgt.obj_target[ai, row, col] = 1.0
        tgt.tx[ai, row, col] = box.x / head.stride - col
        tgt.ty[ai, row, col] = box.y / head.stride - row
        tgt.tw[ai, row, col] = box.w / input_w
        tgt.th[ai, row, col] = box.h / input_h
        tgt.cls_index[ai, row, col] = gt.class_index

    if ground_truth:
        for head, tgt in zip(heads, targets):
            px, py, pw, ph = _predicted_boxes(head)
            best_iou = np.zeros_like(px)
            for gt in ground_truth:
                gx1, gy1, gx2, gy2 = gt.box.corners()
                ix = np.minimum(px + pw / 2, gx2) - np.maximum(px - pw / 2, gx1)
                iy = np.minimum(py + ph / 2, gy2) - np.maximum(py - ph / 2, gy1)
                inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
                union = pw * ph + gt.box.w * gt.box.h - inter
                best_iou = np.maximum(best_iou, inter / union)
            tgt.ignore_mask = (best_iou > ignore_iou) & ~tgt.obj_mask
    return TargetAssignment(targets)


def _head_pieces(head: HeadOutput, index: int):
    rows, cols = head.grid
    c = head.num_classes
    raw = head.raw.reshape(3, 5 + c, rows, cols)
    if not np.all(np.isfinite(raw)):
        raise NumericError(f"head {index} (stride {head.stride}) has non-finite raw values")
    input_w = head.stride * cols
    input_h = head.stride * rows
    aw = np.array([a[0] for a in head.anchors])[:, None, None] / input_w
    ah = np.array([a[1] for a in head.anchors])[:, None, None] / input_h
    px = sigmoid(raw[:, 0])
    py = sigmoid(raw[:, 1])
    pw = aw * np.exp(raw[:, 2])
    ph = ah * np.exp(raw[:, 3])
    pobj = sigmoid(raw[:, 4])
    pcls = sigmoid(raw[:, 5:])
    return raw, px, py, pw, ph, pobj, pcls


def _one_hot(tgt: HeadTargets, num_classes: int):
    hot = np.zeros((3, num_classes) + tgt.cls_index.shape[1:], dtype=float)
    a, i, j = np.nonzero(tgt.obj_mask)
    hot[a, tgt.cls_index[a, i, j], i, j] = 1.0
    return hot


def total_loss(heads, assignment: TargetAssignment,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Composite squared-error loss; total is exactly the sum of the parts."""
    w = weights or LossWeights()
    w.validate()
    coord = iou_term = cls_term = 0.0
    for index, (head, tgt) in enumerate(zip(heads, assignment.heads)):
        _, px, py, pw, ph, pobj, pcls = _head_pieces(head, index)
        obj = tgt.obj_mask
        noobj = ~obj & ~tgt.ignore_mask
        coord += w.coord * float(
            np.sum(((px - tgt.tx) ** 2 + (py - tgt.ty) ** 2)[obj])
        )
        coord += w.coord * float(
            np.sum(
                ((np.sqrt(pw) - np.sqrt(tgt.tw)) ** 2 + (np.sqrt(ph) - np.sqrt(tgt.th)) ** 2)[obj]
            )
        )
        iou_term += w.iou * float(np.sum(((pobj - tgt.obj_target) ** 2)[obj]))
        iou_term += w.noobj * float(np.sum((pobj ** 2)[noobj]))
        hot = _one_hot(tgt, head.num_classes)
        cls_term += w.cls * float(np.sum(((pcls - hot) ** 2) * obj[:, None, :, :]))
    total = coord + iou_term + cls_term
    return LossBreakdown(total, coord, iou_term, cls_term)


def loss_gradients(heads, assignment: TargetAssignment,
                   weights: LossWeights | None = None) -> list[np.ndarray]:
    """d(total loss)/d(raw head values), one array per head, raw layout."""
    w = weights or LossWeights()
    w.validate()
    grads = []
    for index, (head, tgt) in enumerate(zip(heads, assignment.heads)):
        raw, px, py, pw, ph, pobj, pcls = _head_pieces(head, index)
        obj = tgt.obj_mask
        noobj = ~obj & ~tgt.ignore_mask
        g = np.zeros_like(raw)
        g[:, 0] = w.coord * 2 * (px - tgt.tx) * px * (1 - px) * obj
        g[:, 1] = w.coord * 2 * (py - tgt.ty) * py * (1 - py) * obj
        # d/dt of (sqrt(a*e^t) - sqrt(b))^2 = (sqrt(a*e^t) - sqrt(b)) * sqrt(a*e^t)
        g[:, 2] = w.coord * (np.sqrt(pw) - np.sqrt(tgt.tw)) * np.sqrt(pw) * obj
        g[:, 3] = w.coord * (np.sqrt(ph) - np.sqrt(tgt.th)) * np.sqrt(ph) * obj
        dobj = w.iou * 2 * (pobj - tgt.obj_target) * obj + w.noobj * 2 * pobj * noobj
        g[:, 4] = dobj * pobj * (1 - pobj)
        hot = _one_hot(tgt, head.num_classes)
        g[:, 5:] = w.cls * 2 * (pcls - hot) * pcls * (1 - pcls) * obj[:, None, :, :]
        grads.append(g.reshape(head.raw.shape))
    return grads


def sgd_step(network: Network, state: dict, lr: float, momentum: float) -> None:
    """One momentum-SGD update from the accumulated parameter gradients.

    ``v <- momentum*v + g; p <- p - lr*v`` for every learnable array.
    ``state`` maps (layer index, array name) to its velocity buffer and is
    created lazily; pass the same dict across steps.
    """
    for i, p in network.conv_layers():
        for name, value, grad in p.learnable():
            if grad is None:
                raise UsageError(f"layer {i} has no gradients; run a backward pass first")
            key = (i, name)
            velocity = state.get(key)
            if velocity is None:
                velocity = np.zeros_like(value)
                state[key] = velocity
            velocity *= momentum
            velocity += grad
            value -= lr * velocity


# ---------------------------------------------------------------------------
# Synthetic data and the toy trainer
# ---------------------------------------------------------------------------

_TOY_COLORS = (
    (0.85, 0.15, 0.10),
    (0.10, 0.30, 0.85),
    (0.90, 0.80, 0.10),
    (0.15, 0.80, 0.30),
)


@dataclass
class ToyExample:
    image_id: str
    image: np.ndarray
    boxes: list[GroundTruthBox] = field(default_factory=list)


def synthetic_dataset(num_images: int = 32, size: int = 64, num_classes: int = 2,
                      seed: int = 0) -> list[ToyExample]:
    """Seeded colored rectangles on noise backgrounds, with exact labels."""
    if num_classes > len(_TOY_COLORS):
        raise UsageError(f"at most {len(_TOY_COLORS)} synthetic classes supported")
    rng = np.random.default_rng(seed)
    examples = []
    for n in range(num_images):
        image = rng.uniform(0.0, 0.3, size=(3, size, size))
        boxes = []
        placed = []
        for _ in range(int(rng.integers(1, 3))):
            for _attempt in range(10):
                w = int(rng.integers(12, 29))
                h = int(rng.integers(12, 29))
                x0 = int(rng.integers(1, size - w - 1))
                y0 = int(rng.integers(1, size - h - 1))
                if all(
                    x0 + w <= px or px + pw <= x0 or y0 + h <= py or py + ph <= y0
                    for px, py, pw, ph in placed
                ):
                    break
            else:
                continue
            cls = int(rng.integers(num_classes))
            color = np.array(_TOY_COLORS[cls])[:, None, None]
            image[:, y0 : y0 + h, x0 : x0 + w] = color
            placed.append((x0, y0, w, h))
            boxes.append(
                GroundTruthBox(f"toy_{n:03d}", cls, Box(x0 + w / 2, y0 + h / 2, w, h))
            )
        examples.append(ToyExample(f"toy_{n:03d}", image, boxes))
    return examples


_TOY_CFG = """\
[net]
width={size}
height={size}
channels=3

[convolutional]
filters=8
size=3
stride=1
pad=1
batch_normalize=1
activation=leaky

[convolutional]
filters=16
size=3
stride=2
pad=1
batch_normalize=1
activation=leaky

[convolutional]
filters=16
size=3
stride=2
pad=1
batch_normalize=1
activation=leaky

[convolutional]
filters=32
size=3
stride=2
pad=1
batch_normalize=1
activation=leaky

[convolutional]
filters={head}
size=1
stride=1
pad=1
activation=linear

[yolo]
classes={classes}
num=3
mask=0,1,2
anchors=10,13,16,30,33,23
ignore_thresh=0.5
"""


def toy_graph(num_classes: int = 2, size: int = 64) -> ModelGraph:
    """Six-layer detection micrograph (5 convs + 1 head) at stride 8."""
    text = _TOY_CFG.format(size=size, head=3 * (5 + num_classes), classes=num_classes)
    return parse_cfg(text)


@dataclass
class ToyTrainConfig:
    steps: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)


def train_toy(dataset: list[ToyExample], graph: ModelGraph,
              config: ToyTrainConfig | None = None) -> list[float]:
    """Gradient-accumulated SGD over the toy set; returns per-step mean loss.

    Each step accumulates gradients over ``batch_size`` consecutive images
    (wrapping around the dataset), averages them, and applies one momentum
    update. Fully deterministic for a fixed seed.
    """
    config = config or ToyTrainConfig()
    if config.steps < 0:
        raise UsageError("steps must be >= 0")
    net = random_init(graph, seed=config.seed, dtype=np.float64)
    state: dict = {}
    history: list[float] = []
    cursor = 0
    for _step in range(config.steps):
        net.zero_grads()
        batch_loss = 0.0
        for _ in range(config.batch_size):
            example = dataset[cursor % len(dataset)]
            cursor += 1
            tape = GradTape()
            heads = net.forward(example.image, tape)
            assignment = assign_targets(example.boxes, heads)
            breakdown = total_loss(heads, assignment, config.loss_weights)
            grads = loss_gradients(heads, assignment, config.loss_weights)
            net.backward(tape, zip(heads, grads))
            batch_loss += breakdown.total
        mean_loss = batch_loss / config.batch_size
        if not np.isfinite(mean_loss):
            raise NumericError(f"training diverged at step {_step}: loss {mean_loss}")
        for _, p in net.conv_layers():
            for _name, _value, grad in p.learnable():
                grad /= config.batch_size
        sgd_step(net, state, config.lr, config.momentum)
        history.append(mean_loss)
    return history
