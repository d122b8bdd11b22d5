import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multiscale_cate import RasterBundle, UnitRecord
from multiscale_cate._util import philox

settings.register_profile(
    "suite",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def make_bundle(width=64, height=64, bands=2, seed=0, pixel_size_m=10.0):
    data = philox("bundle", seed).standard_normal((bands, height, width)).astype(np.float32)
    return RasterBundle(
        width=width, height=height, bands=bands, pixel_size_m=pixel_size_m, data=data
    )


def make_units(n, bundle, seed=0, margin=8, outcome=None, treatment=None):
    rng = philox("units", seed)
    cols = rng.integers(margin, bundle.width - margin, n)
    rows = rng.integers(margin, bundle.height - margin, n)
    w = treatment if treatment is not None else rng.integers(0, 2, n)
    y = outcome if outcome is not None else rng.standard_normal(n)
    return [
        UnitRecord(
            id=f"u{i:05d}",
            x=(float(cols[i]) + 0.5, float(rows[i]) + 0.5),
            w=int(w[i]),
            y=float(y[i]),
        )
        for i in range(n)
    ]


@pytest.fixture
def bundle():
    return make_bundle()


@pytest.fixture
def units(bundle):
    return make_units(40, bundle, seed=3)
