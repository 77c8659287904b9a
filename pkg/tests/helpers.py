import numpy as np

from continual.types import Image, LabelMap, Sample


def make_sample(sample_id: int, labels, task_id: int = 0, image=None, seed: int = 0) -> Sample:
    """Sample with the given label grid and a random (or given) image."""
    labels = np.asarray(labels, dtype=np.uint8)
    if image is None:
        image = np.random.default_rng(seed + sample_id).random((3,) + labels.shape)
    return Sample(sample_id, Image(np.asarray(image, dtype=np.float32)), LabelMap(labels), task_id)
