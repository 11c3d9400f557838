import numpy as np
import pytest

from terralign import encoders


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(mask_action=False):
    """Small config used wherever gradients are checked coordinate by coordinate."""
    return encoders.ModelConfig(
        obs=encoders.ObsEncoderConfig(
            height=8, width=8, channels=(4, 4), kernel=3, stride=2, padding=1,
            groups=2, hidden=8, out_dim=8,
        ),
        loco=encoders.SeqEncoderConfig(
            in_channels=5, channels=(4, 4), kernel=3, stride=2, padding=1,
            groups=2, hidden=8, out_dim=8,
        ),
        act=encoders.SeqEncoderConfig(
            in_channels=2, channels=(4, 4), kernel=3, stride=2, padding=1,
            groups=2, hidden=8, out_dim=8,
        ),
        fusion_hidden=8,
        out_dim=8,
        window=12,
        mask_action=mask_action,
    )


def tiny_batch(rng, n=4):
    return {
        "obs": rng.random((n, 8, 8)).astype(np.float32),
        "loco": rng.standard_normal((n, 12, 5)).astype(np.float32),
        "act": rng.random((n, 12, 2)).astype(np.float32),
    }
