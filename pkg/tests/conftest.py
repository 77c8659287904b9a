import pytest

from continual.schemas import DomainParams, RunConfig, ScenarioSpec
from continual.synthdata import generate_scenario
from continual.types import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_class_spec():
    return ScenarioSpec.class_incremental(height=12, width=12, train_per_task=[10, 10, 10],
                                          val_per_task=[4, 4, 4])


@pytest.fixture
def tiny_domain_spec():
    return ScenarioSpec.domain_incremental(
        height=12, width=12, train_per_task=[10, 10], val_per_task=[4, 4],
        domains=[DomainParams(), DomainParams(palette_rotation=90.0, noise_sigma=0.05, blur_radius=1)],
    )


@pytest.fixture
def tiny_class_tasks(tiny_class_spec):
    return generate_scenario(tiny_class_spec, Rng(7))


@pytest.fixture
def tiny_domain_tasks(tiny_domain_spec):
    return generate_scenario(tiny_domain_spec, Rng(7))


@pytest.fixture
def tiny_config():
    return RunConfig(seed=3, patch_size=3, hidden_widths=(8, 6), epochs=2, batch_size=4,
                     learning_rate=1e-2, buffer_size=6, policy="random", cka_pixels=200)
