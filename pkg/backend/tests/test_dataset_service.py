import json

import numpy as np
import pytest
from PIL import Image

from models.data import EpisodeSpec, SyntheticConfig
from models.errors import RejectedInputError
from services.dataset_service import _translate, load_image_folder, make_synthetic_domains, sample_episode, split_classes


def test_synthetic_benchmark_is_deterministic(tiny_config):
    a = make_synthetic_domains(tiny_config, seed=7)
    b = make_synthetic_domains(tiny_config, seed=7)
    c = make_synthetic_domains(tiny_config, seed=8)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, c.images)


def test_shapes_and_splits(tiny_dataset, tiny_config):
    n_classes = tiny_config.num_domains * tiny_config.classes_per_domain
    assert tiny_dataset.images.shape == (n_classes * 20, 8, 8, 3)
    assert tiny_dataset.images.dtype == np.float32
    assert 0.0 <= tiny_dataset.images.min() and tiny_dataset.images.max() <= 1.0
    splits = [set(split_classes(tiny_dataset, s)) for s in ("meta-train", "meta-val", "meta-test")]
    assert sum(len(s) for s in splits) == n_classes
    assert not (splits[0] & splits[1]) and not (splits[0] & splits[2]) and not (splits[1] & splits[2])
    # 10 classes per domain -> 5 / 2 / 3
    assert len(split_classes(tiny_dataset, "meta-train", "d0")) == 5
    assert len(split_classes(tiny_dataset, "meta-test", "d1")) == 3


def test_domain_offsets_differ_by_shift():
    config = SyntheticConfig(num_domains=3, classes_per_domain=2, samples_per_class=2, image_size=8, channel_shift=0.1)
    dataset = make_synthetic_domains(config, seed=0)
    offsets = np.array([dataset.domain_offsets[d] for d in ("d0", "d1", "d2")])
    assert np.allclose(np.diff(offsets, axis=0), 0.1)


def test_rejects_too_many_bands():
    with pytest.raises(RejectedInputError):
        make_synthetic_domains(SyntheticConfig(num_domains=3, first_domain=6, image_size=8), seed=0)


def test_episode_sampling(tiny_dataset):
    classes = split_classes(tiny_dataset, "meta-test")
    spec = EpisodeSpec(N=5, K=2, U=3)
    episode = sample_episode(tiny_dataset, classes, spec, seed=11)
    assert episode.support_images.shape == (10, 8, 8, 3)
    assert episode.query_images.shape == (15, 8, 8, 3)
    assert sorted(set(episode.support_labels.tolist())) == [0, 1, 2, 3, 4]
    assert set(episode.class_map.values()) <= set(classes)
    support_rows = {r for _, r in episode.support_index}
    query_rows = {r for _, r in episode.query_index}
    assert not support_rows & query_rows
    again = sample_episode(tiny_dataset, classes, spec, seed=11)
    assert np.array_equal(episode.query_images, again.query_images)


def test_episode_needs_enough_classes_and_samples(tiny_dataset):
    classes = split_classes(tiny_dataset, "meta-val")
    with pytest.raises(RejectedInputError):
        sample_episode(tiny_dataset, classes, EpisodeSpec(N=5, K=1, U=1), seed=0)
    with pytest.raises(RejectedInputError):
        sample_episode(tiny_dataset, split_classes(tiny_dataset, "meta-test"), EpisodeSpec(N=2, K=15, U=15), seed=0)


def test_image_folder_adapter(tmp_path):
    rng = np.random.default_rng(0)
    for name, count in (("cat", 3), ("dog", 4), ("fox", 3)):
        folder = tmp_path / "images" / name
        folder.mkdir(parents=True)
        for k in range(count):
            Image.fromarray(rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)).save(folder / f"{k}.png")
    split = tmp_path / "split.json"
    split.write_text(json.dumps({"meta-train": ["cat", "dog"], "meta-test": ["fox"]}))
    dataset = load_image_folder(tmp_path / "images", split, image_size=8)
    assert dataset.images.shape == (9, 8, 8, 3)
    assert split_classes(dataset, "meta-test") == [2]
    assert dataset.class_names[1] == "dog"


def test_translation_does_not_wrap_around():
    image = np.zeros((8, 8, 3), dtype=np.float32)
    image[-1] = 1.0
    image[:, 0] = 0.5
    down = _translate(image, 2, 0, pad=2)
    assert np.array_equal(down[2:], image[:-2])
    assert np.all(down[:2] == image[0])
    right = _translate(image, 0, -1, pad=2)
    assert np.array_equal(right[:, :-1], image[:, 1:])
    assert np.array_equal(right[:, -1], image[:, -1])
    assert np.array_equal(_translate(image, 0, 0, pad=2), image)
