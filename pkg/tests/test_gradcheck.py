"""The gradient checker itself: sensitivity, micro-net generation, metrics."""

import numpy as np

from yolokit.gradcheck import (
    check_micro_net,
    random_micro_net,
    relative_errors,
    run_gradient_fidelity,
)


def test_small_batch_of_micro_nets_passes():
    summary = run_gradient_fidelity(seed=123, num_nets=5)
    assert summary.max_rel_error <= 1e-4
    assert summary.checked > 0


def test_injected_fault_is_detected():
    clean = run_gradient_fidelity(seed=7, num_nets=2)
    faulty = run_gradient_fidelity(seed=7, num_nets=2, fault=1e-2)
    assert clean.max_rel_error <= 1e-4
    assert faulty.max_rel_error > 1e-4


def test_micro_nets_have_parameters_and_run():
    rng = np.random.default_rng(5)
    for _ in range(10):
        net, x = random_micro_net(rng)
        assert net.conv_params()
        result = check_micro_net(net, x, rng)
        assert result.checked > 0


def test_relative_error_floor_suppresses_roundoff():
    analytic = np.array([1.0, 1e-12])
    numeric = np.array([1.0, 3e-12])  # absolute noise far below the scale
    # naive |a-b|/max(|a|,|b|) would report ~0.67 here; the floor keeps it tiny
    assert relative_errors(analytic, numeric).max() < 1e-8


def test_relative_error_catches_disagreement():
    analytic = np.array([1.0, 0.5])
    numeric = np.array([1.0, 0.55])
    assert relative_errors(analytic, numeric).max() > 0.05
