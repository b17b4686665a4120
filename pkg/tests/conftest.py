"""Shared helpers: parameter randomizers and tiny-model builders."""

import sys

import numpy as np
import pytest

from bimal.flow import FlowModel


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the one-line verdicts collected by the acceptance tests.

    Pytest captures stdout from passing tests, so the per-criterion lines
    are replayed here where they are always visible.
    """
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def randomize_flow_params(model: FlowModel, rng: np.random.Generator, amp: float = 0.25) -> None:
    """Give every flow parameter a small random value (and mark ActNorms live).

    Keeps the model well-conditioned: couplings bounded by scale_cap, mix
    factors near the permutation, ActNorm scales near 1.
    """
    for scale in model.scales:
        for step in scale.steps:
            step.norm.log_scale.assign(rng.normal(0.0, amp, step.norm.channels))
            step.norm.bias.assign(rng.normal(0.0, amp, step.norm.channels))
            step.norm.initialized = True
            c = step.mix.channels
            step.mix.lower.assign(rng.normal(0.0, amp / c, (c, c)))
            step.mix.upper.assign(rng.normal(0.0, amp / c, (c, c)))
            step.mix.log_diag.assign(rng.normal(0.0, amp / 2, c))
            for p in step.couple.params():
                p.assign(rng.normal(0.0, amp, p.value.shape))


def tiny_flow(seed: int = 0, randomized: bool = True, **kwargs) -> FlowModel:
    """A 4x4x2 (D=32) flow, small enough for brute-force oracles."""
    opts = dict(
        height=4, width=4, in_channels=2, num_scales=2, steps_per_scale=2,
        hidden_width=4, seed=seed, identity_init=not randomized,
    )
    opts.update(kwargs)
    model = FlowModel(**opts)
    if randomized:
        randomize_flow_params(model, np.random.default_rng(seed + 1000))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
