import numpy as np
import pytest

from dplreid.samples import load_dataset, save_dataset
from dplreid.synth_data import DatasetConfig, build_dataset, generate_identity, render_sample


def test_identity_is_deterministic():
    cfg = DatasetConfig(seed=11)
    assert generate_identity(cfg, 3) == generate_identity(cfg, 3)


def test_identities_differ():
    cfg = DatasetConfig()
    assert generate_identity(cfg, 0).part_colors != generate_identity(cfg, 1).part_colors


def test_hundred_identities_have_unique_colours():
    cfg = DatasetConfig(num_ids=100)
    tuples = {generate_identity(cfg, i).part_colors for i in range(100)}
    assert len(tuples) == 100


def test_identity_range_checked():
    with pytest.raises(ValueError):
        generate_identity(DatasetConfig(num_ids=4), 4)


def test_render_is_deterministic_and_in_range():
    cfg = DatasetConfig()
    spec = generate_identity(cfg, 0)
    a = render_sample(spec, 1, np.random.default_rng(3), cfg)
    b = render_sample(spec, 1, np.random.default_rng(3), cfg)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    assert a.pixels.shape == (64, 32, 3)
    assert (a.person_id, a.camera_id, a.occluded) == (0, 1, False)


@pytest.mark.parametrize("pid", [0, 5, 9])
def test_camera_brightness_offset(pid):
    cfg = DatasetConfig(num_ids=10, cams=3, camera_offset_step=0.05)
    spec = generate_identity(cfg, pid)
    img0 = render_sample(spec, 0, np.random.default_rng(8), cfg).pixels
    img2 = render_sample(spec, 2, np.random.default_rng(8), cfg).pixels
    expected = cfg.camera_offset(2) - cfg.camera_offset(0)
    assert img2.mean() - img0.mean() == pytest.approx(expected, abs=0.01)


def test_split_arithmetic():
    ds = build_dataset(DatasetConfig(num_ids=10, query_frac=0.5, cams=2, samples_per_id_per_cam=2))
    assert len({s.person_id for s in ds["train"]}) == 5
    assert len({s.person_id for s in ds["query"] + ds["gallery"]}) == 5


def test_single_camera_is_infeasible():
    with pytest.raises(ValueError, match="cams"):
        DatasetConfig(cams=1)


def test_total_count():
    ds = build_dataset(DatasetConfig(num_ids=20, cams=3, samples_per_id_per_cam=4))
    assert sum(len(v) for v in ds.values()) == 240


@pytest.mark.parametrize("spc", [1, 2, 4])
def test_open_set_and_cross_camera_matches(spc):
    ds = build_dataset(DatasetConfig(num_ids=12, cams=3, samples_per_id_per_cam=spc))
    train_ids = {s.person_id for s in ds["train"]}
    eval_ids = {s.person_id for s in ds["query"] + ds["gallery"]}
    assert not train_ids & eval_ids
    for q in ds["query"]:
        assert any(g.person_id == q.person_id and g.camera_id != q.camera_id for g in ds["gallery"])


def test_dataset_is_byte_stable(tmp_path):
    cfg = DatasetConfig(num_ids=6, cams=2, samples_per_id_per_cam=2, seed=4)
    a, b = build_dataset(cfg), build_dataset(cfg)
    for split in a:
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a[split], b[split]))
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    assert (tmp_path / "a" / "dataset.json").read_bytes() == (tmp_path / "b" / "dataset.json").read_bytes()
    for f in sorted((tmp_path / "a" / "train").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "train" / f.name).read_bytes()


def test_dataset_directory_round_trip(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, tmp_path)
    assert (tmp_path / "train").is_dir()
    back = load_dataset(tmp_path)
    for split in tiny_dataset:
        assert len(back[split]) == len(tiny_dataset[split])
        for x, y in zip(tiny_dataset[split], back[split]):
            assert (x.person_id, x.camera_id, x.index, x.split) == (y.person_id, y.camera_id, y.index, y.split)
            assert np.array_equal(x.pixels, y.pixels)
    name = tiny_dataset["train"][0]
    assert (tmp_path / "train" / f"{name.person_id}_{name.camera_id}_{name.index}.png").is_file()
