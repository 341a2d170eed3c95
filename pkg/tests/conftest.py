import numpy as np
import pytest

from duetgen.config import TrainConfig


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def grad_rel_err(bw: dict, fd: dict) -> float:
    """Worst absolute disagreement relative to the overall gradient scale.

    Per-tensor relative error degenerates on parameters whose true gradient
    is (exactly) zero, where finite differences only see cancellation noise.
    """
    scale = max(
        max(np.abs(g).max() for g in bw.values()),
        max(np.abs(g).max() for g in fd.values()),
        1e-12,
    )
    worst = max(np.abs(bw[name] - fd[name]).max() for name in bw)
    return float(worst / scale)


@pytest.fixture
def tiny_config():
    """Small everything: fast to train a few steps in-process."""
    return TrainConfig(
        width=32,
        heads=2,
        backbone_layers=2,
        encoder_layers=1,
        head_layers=1,
        head_width=32,
        train_scripts=12,
        tts_scripts=12,
        eval_scripts=4,
        batch_size=6,
        total_steps=4,
        min_patches=3,
        max_patches_data=5,
    )
