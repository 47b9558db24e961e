"""End-to-end gradient flow through Network.forward/backward and the loss.

The micro-net gradient checks drive kernels directly; this exercises the
graph executor itself (route concat, shortcut add, pooling, per-layer
parameter slots) with the same loss-seeded backward pass the trainer uses.
Activations are kept smooth (sigmoid/linear) so central differences are
valid everywhere.
"""

import numpy as np

from yolokit.cfg import parse_cfg
from yolokit.detect import Box
from yolokit.evaluation import GroundTruthBox
from yolokit.gradcheck import finite_difference, relative_errors
from yolokit.loss import assign_targets, loss_gradients, total_loss
from yolokit.ops import GradTape
from yolokit.weights import random_init

BRANCHY_CFG = """\
[net]
width=64
height=64
channels=3

[convolutional]
filters=8
size=3
stride=2
pad=1
batch_normalize=1
activation=sigmoid

[convolutional]
filters=8
size=3
stride=1
pad=1
batch_normalize=1
activation=sigmoid

[shortcut]
from=-2

[convolutional]
filters=16
size=3
stride=2
pad=1
batch_normalize=1
activation=sigmoid

[maxpool]
size=3
stride=2
padding=1

[convolutional]
filters=8
size=1
stride=1
pad=1
activation=linear

[route]
layers=-1,-2

[convolutional]
filters=21
size=1
stride=1
pad=1
activation=linear

[yolo]
classes=2
num=3
mask=0,1,2
anchors=10,13,16,30,33,23
"""


def test_network_backward_matches_finite_differences_through_loss():
    graph = parse_cfg(BRANCHY_CFG)
    net = random_init(graph, seed=4)
    image = np.random.default_rng(4).uniform(0, 1, (3, 64, 64))
    truth = [
        GroundTruthBox("img", 0, Box(20.0, 24.0, 14.0, 18.0)),
        GroundTruthBox("img", 1, Box(48.0, 40.0, 26.0, 20.0)),
    ]

    net.zero_grads()
    tape = GradTape()
    heads = net.forward(image, tape)
    assert heads[0].stride == 8 and heads[0].grid == (8, 8)
    assignment = assign_targets(truth, heads)
    assert assignment.heads[0].obj_mask.sum() == 2
    net.backward(tape, zip(heads, loss_gradients(heads, assignment)))

    def objective():
        fresh = net.forward(image)
        return total_loss(fresh, assignment).total

    convs = dict(net.conv_layers())
    # first conv (feeds everything), the post-pool conv, and the head conv
    for layer_index in (0, 5, 7):
        p = convs[layer_index]
        fd = finite_difference(objective, p.weights)
        rel = relative_errors(p.g_weights.ravel(), fd.ravel())
        assert rel.max() <= 1e-4, f"layer {layer_index}: max rel err {rel.max():.2e}"


def test_gradients_accumulate_across_images_like_the_trainer():
    graph = parse_cfg(BRANCHY_CFG)
    net = random_init(graph, seed=5)
    rng = np.random.default_rng(5)
    images = [rng.uniform(0, 1, (3, 64, 64)) for _ in range(2)]
    truth = [GroundTruthBox("img", 0, Box(30.0, 30.0, 16.0, 16.0))]

    def run(images_subset, zero_first=True):
        if zero_first:
            net.zero_grads()
        for image in images_subset:
            tape = GradTape()
            heads = net.forward(image, tape)
            assignment = assign_targets(truth, heads)
            net.backward(tape, zip(heads, loss_gradients(heads, assignment)))
        return {i: p.g_weights.copy() for i, p in net.conv_layers()}

    first = run(images[:1])
    second = run(images[1:])
    both = run(images)
    for i in first:
        np.testing.assert_allclose(both[i], first[i] + second[i], rtol=1e-12, atol=1e-15)
