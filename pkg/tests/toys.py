"""Small random instances shared by the test modules."""

import numpy as np

from armrefine.arm import ArmConfig, init_arm_weights
from armrefine.provider import FeatureBundle
from armrefine.tensor import Tensor


def toy_bundle(rng, grid=2, embed=4, encoder=4, classes=2, temperature=5.0, layers=(3, 7)):
    n = grid * grid
    text = rng.standard_normal((classes, embed))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    return FeatureBundle(
        early=rng.standard_normal((n, encoder)),
        late=rng.standard_normal((n, encoder)),
        deep=rng.standard_normal((n, embed)),
        text=text,
        temperature=temperature,
        layers=layers,
    )


def toy_weights(rng, cfg: ArmConfig, embed=4, encoder=4, scale=0.5):
    """float64 weights with every entry drawn at a healthy magnitude."""
    w = init_arm_weights(0, cfg, encoder, embed, dtype=np.float64)
    for t in w.parameters():
        t.assign(scale * rng.standard_normal(t.shape))
    return w


def as_tensor64(x):
    return Tensor(np.asarray(x, dtype=np.float64))
