import numpy as np
import pytest

from unirep.domains import SynthSpec, generate_synthetic, split, whiten


def make_domains(specs, split_seed=0):
    """Generate, split and whiten a list of synthetic specs as domains 1..D."""
    out = []
    for d, spec in enumerate(specs, start=1):
        ds = generate_synthetic(spec, d)
        ds.assignment = split(ds, 0.8, seed=[split_seed, d])
        ds, _ = whiten(ds)
        out.append(ds)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_domains():
    return make_domains([
        SynthSpec(num_classes=4, n_per_class=20, seed=1, geometry_seed=1),
        SynthSpec(num_classes=3, n_per_class=20, mean_offset=3, variance_scale=4, seed=2, geometry_seed=2,
                  style="glyph"),
    ])
