import dataclasses

import pytest

from terrafuse import synthgen


@pytest.fixture(scope="session")
def tiny_world():
    """Short two-surface world shared by dataset/CLI tests."""
    spec = synthgen.WorldSpec(
        segments=(synthgen.Segment("grass", 1.2), synthgen.Segment("paved", 1.2)),
    )
    return synthgen.generate_world(spec, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world, tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    synthgen.generate_dataset(tiny_world, root)
    return root


@pytest.fixture(scope="session")
def flat_thermal_materials():
    """Material table with noise-free thermal and flat ground, for exactness checks."""
    mats = synthgen.default_materials()
    return {
        name: dataclasses.replace(m, thermal_noise=0.0, thermal_drift=0.0, roughness=0.0)
        for name, m in mats.items()
    }
