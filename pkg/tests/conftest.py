from __future__ import annotations

import numpy as np
import pytest

from pcmae import geometry


def random_cloud(seed: int, n: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3)).astype(np.float64)


def cast_params_float64(module) -> None:
    # Gradient checks probe at h=1e-5; float32 parameters would drown the
    # finite-difference signal in rounding noise.
    for p in module.named_parameters().values():
        p.data = p.data.astype(np.float64)


@pytest.fixture
def restore_backend():
    name = geometry.backend_name()
    yield
    geometry.use_backend(name)


def backends() -> list[str]:
    return geometry.available_backends()
