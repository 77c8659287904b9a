import numpy as np
import pytest

from continual.errors import ConfigError, EmptyHistogramError, InvalidLabelError, ShapeError
from continual.schemas import RunConfig, ScenarioSpec, SelectionPolicy
from continual.types import IGNORE, ClassHistogram, Image, LabelMap, Rng, class_histogram, histogram_distribution


# Test the image validation
def test_image_rejects_out_of_range_and_non_finite():
    with pytest.raises(ShapeError):
        Image(np.full((3, 4, 4), 1.5))
    with pytest.raises(ShapeError):
        Image(np.full((3, 4, 4), np.nan))
    with pytest.raises(ShapeError):
        Image(np.zeros((4, 4)))

# Test the image dtype normalisation
def test_image_is_stored_as_float32():
    image = Image(np.zeros((3, 5, 6)))
    assert image.data.dtype == np.float32
    assert (image.channels, image.height, image.width) == (3, 5, 6)

# Test restricting a label map to a class set
def test_label_map_restricted_to():
    labels = LabelMap(np.array([[0, 1], [2, IGNORE]]))
    restricted = labels.restricted_to({1})
    assert restricted.data.tolist() == [[IGNORE, 1], [IGNORE, IGNORE]]

# Test the class histogram
def test_class_histogram_counts_and_ignores():
    labels = LabelMap(np.array([[0, 0, 2], [IGNORE, 2, 2]]))
    h = class_histogram(labels, 3)
    assert h.counts.tolist() == [2, 0, 3]
    assert h.total == 5
    assert h.distinct == 2

# Test the class histogram with a label beyond the class count
def test_class_histogram_rejects_large_labels():
    with pytest.raises(InvalidLabelError):
        class_histogram(LabelMap(np.array([[5]])), 3)

# Test histogram addition across sizes
def test_histogram_add_pads():
    total = ClassHistogram(np.array([1, 2]), 2) + ClassHistogram(np.array([0, 1, 4]), 3)
    assert total.counts.tolist() == [1, 3, 4]
    assert total.num_classes == 3

# Test normalising an empty histogram
def test_histogram_distribution_empty():
    with pytest.raises(EmptyHistogramError):
        histogram_distribution(ClassHistogram.zeros(4))

# Test substream independence from parent draws
def test_rng_substream_is_stable():
    a = Rng(5)
    a.random(100)
    b = Rng(5)
    assert np.array_equal(a.substream("x", 1).random(5), b.substream("x", 1).random(5))
    assert not np.array_equal(b.substream("x", 1).random(5), b.substream("x", 2).random(5))

# Test the run config defaults
def test_run_config_defaults():
    config = RunConfig()
    assert config.epochs == 30
    assert config.learning_rate == 4e-4
    assert config.buffer_size == 64
    assert config.hidden_widths == (64, 32)

# Test reading a key-value run config file
def test_run_config_from_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# tiny run\nPOLICY=gss\nCMP=3\nHIDDEN_WIDTHS=16,8\nEPOCHS=4\n")
    config = RunConfig.from_file(path, seed=9)
    assert config.policy.value == "gss"
    assert config.cmp == 3
    assert config.hidden_widths == (16, 8)
    assert config.seed == 9

# Test invalid run config values
def test_run_config_invalid_values(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("TH=3.5\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)

# Test policy directions
def test_selection_policy_default_directions():
    assert SelectionPolicy(id="tv_label").resolved_direction() == "max"
    assert SelectionPolicy(id="brisque").resolved_direction() == "min"
    assert SelectionPolicy(id="ambivalent", direction="min").resolved_direction() == "min"

# Test the distillation switch
def test_uses_distillation():
    assert RunConfig(policy="random").uses_distillation("class")
    assert not RunConfig(policy="random").uses_distillation("domain")
    assert not RunConfig(policy="none").uses_distillation("class")
    assert RunConfig(policy="none", distillation="on").uses_distillation("class")

# Test the class-incremental scenario builder
def test_class_incremental_scenario_defaults():
    spec = ScenarioSpec.class_incremental()
    assert spec.num_tasks == 3
    assert spec.labeled_classes == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
    assert spec.exclusive_classes == [5, 6]

# Test scenario validation of class order
def test_scenario_rejects_out_of_order_classes():
    with pytest.raises(ConfigError):
        ScenarioSpec.class_incremental(labeled_classes=[[4, 5, 6], [0, 1, 2, 3], [7, 8, 9]])
