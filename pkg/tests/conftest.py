"""Session fixtures: synthetic datasets are expensive to build, so the
seed-7 toy bundle and a small fast bundle are created once per run.
"""
from __future__ import annotations

import numpy as np
import pytest

from mirror_splat.synthesizer import SynthConfig, synthesize_toy_scene

# One line per acceptance criterion, printed in the terminal summary so a
# full run always ends with a visible pass/fail report.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str):
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[criterion {number}] {status} - {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def toy_bundle():
    """Seed-7 toy dataset at the acceptance protocol's scale:
    (gt_scene, gt_plane, dataset) with 30 train / 8 test views at 64x64."""
    return synthesize_toy_scene(7)


@pytest.fixture(scope="session")
def tiny_bundle():
    """Small, fast dataset for training-behavior tests: 6 train / 2 test
    views at 32x32."""
    cfg = SynthConfig(n_train_views=6, n_test_views=2, width=32, height=32)
    return synthesize_toy_scene(11, cfg)


@pytest.fixture(scope="session")
def maskless_bundle(tiny_bundle):
    """The tiny dataset with every mirror mask (and depth) cleared: a
    dataset that simply has no mirror in it."""
    from dataclasses import replace

    _, _, dataset = tiny_bundle
    from mirror_splat.scene import MirrorDataset

    def strip(view):
        return replace(view, mirror_mask=np.zeros_like(view.mirror_mask),
                       depth=None)

    return MirrorDataset([strip(v) for v in dataset.train_views],
                         [strip(v) for v in dataset.test_views],
                         gt_plane=None)
