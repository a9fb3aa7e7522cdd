import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protofed.datasets import (
    DataFormatError,
    LabeledDataset,
    MinMaxScaler,
    gen_synthetic_blobs,
    load_idx_images,
    load_tabular,
    partition_extreme,
    read_idx,
    read_tabular,
    split_per_class,
    write_idx,
)


def test_partition_example():
    data = LabeledDataset(np.arange(8.0).reshape(4, 2), [0, 0, 1, 2], 3)
    shards = partition_extreme(data, 3)
    assert [len(s) for s in shards] == [2, 1, 1]
    assert [s.label for s in shards] == [0, 1, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_partition_is_a_set_partition(labels):
    c = max(labels) + 1
    data = LabeledDataset(np.zeros((len(labels), 1)), labels, c)
    shards = partition_extreme(data, c)
    ids = np.concatenate([s.sample_ids for s in shards])
    assert sorted(ids.tolist()) == list(range(len(labels)))
    for s in shards:
        assert (data.labels[s.sample_ids] == s.client_id).all()


def test_partition_needs_one_client_per_class():
    data = LabeledDataset(np.zeros((3, 1)), [0, 1, 1], 2)
    with pytest.raises(ValueError):
        partition_extreme(data, 3)


def test_shards_are_read_only():
    shard = partition_extreme(LabeledDataset(np.zeros((2, 1)), [0, 1], 2), 2)[0]
    with pytest.raises(ValueError):
        shard.features[0, 0] = 1.0


def test_blobs_linear_oracle():
    data = gen_synthetic_blobs(2, 2000, 2, 10.0, seed=0)
    m0 = data.features[data.labels == 0].mean(0)
    m1 = data.features[data.labels == 1].mean(0)
    w = m1 - m0
    pred = (data.features - (m0 + m1) / 2) @ w > 0
    assert (pred == (data.labels == 1)).mean() > 0.999


@pytest.mark.parametrize("c,dim,sep", [(8, 16, 8.0), (5, 2, 4.0), (12, 3, 3.0)])
def test_blobs_counts_separation_determinism(c, dim, sep):
    a = gen_synthetic_blobs(c, 50, dim, sep, seed=1)
    b = gen_synthetic_blobs(c, 50, dim, sep, seed=1)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.bincount(a.labels).tolist() == [50] * c
    assert a.dim == dim
    assert gen_synthetic_blobs(c, 50, dim, sep, seed=2).features.tobytes() != a.features.tobytes()


def test_blobs_errors():
    with pytest.raises(ValueError):
        gen_synthetic_blobs(2, 10, 2, 0.0, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic_blobs(3, 10, 1, 1.0, seed=0)
    with pytest.raises(ValueError):
        gen_synthetic_blobs(0, 10, 2, 1.0, seed=0)


@pytest.mark.parametrize("c,dim", [(4, 8), (9, 2)])
def test_blob_means_respect_separation(c, dim):
    # With 5000 samples per class the empirical means sit within ~0.05 of the true ones.
    data = gen_synthetic_blobs(c, 5000, dim, 6.0, seed=3)
    means = np.array([data.features[data.labels == k].mean(0) for k in range(c)])
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)[~np.eye(c, dtype=bool)]
    assert dist.min() > 6.0 - 0.2


def test_split_per_class_is_seeded_and_disjoint():
    data = gen_synthetic_blobs(3, 10, 2, 5.0, seed=0)
    s1, s2 = split_per_class(data, 0.8, 4), split_per_class(data, 0.8, 4)
    assert s1.train.sample_ids.tolist() == s2.train.sample_ids.tolist()
    assert np.bincount(s1.train.labels).tolist() == [8, 8, 8]
    assert not set(s1.train.sample_ids) & set(s1.test.sample_ids)


# -- tabular ----------------------------------------------------------------

def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_min_max_endpoints(tmp_path):
    path = write(tmp_path, "f,label\n0,0\n10,1\n")
    split = load_tabular(path, "label", train_fraction=1.0)
    assert split.train.features[:, 0].tolist() == [0.0, 1.0]


def test_constant_column_scales_to_zero(tmp_path):
    path = write(tmp_path, "a,b,label\n3,1,x\n3,2,y\n3,5,x\n")
    split = load_tabular(path, "label", train_fraction=1.0)
    assert split.train.features[:, 0].tolist() == [0.0, 0.0, 0.0]
    assert split.train.class_names == ["x", "y"]


def test_scaler_round_trip(tmp_path):
    rows = "\n".join(f"{i},{i * i % 7},{i % 3}" for i in range(30))
    split = load_tabular(write(tmp_path, "a,b,label\n" + rows + "\n"), "label", seed=2)
    scaler = MinMaxScaler.from_json(split.scaler.to_json())
    raw = read_tabular(tmp_path / "data.csv", "label")
    again = scaler.transform(raw.subset(split.train.sample_ids).features)
    assert again.tobytes() == split.train.features.tobytes()
    assert split.train.features.min() == 0.0 and split.train.features.max() == 1.0


def test_reload_is_bit_identical(tmp_path):
    path = write(tmp_path, "a,label\n1.5,0\n2.5,1\n0.5,0\n")
    a, b = read_tabular(path, "label"), read_tabular(path, "label")
    assert a.features.tobytes() == b.features.tobytes()


def test_drop_columns(tmp_path):
    path = write(tmp_path, "subject,a,label\ns1,1,0\ns2,2,1\n")
    assert read_tabular(path, "label", drop_columns=["subject"]).dim == 1


@pytest.mark.parametrize(
    "text,where",
    [
        ("a,label\n1,0\n2\n", ":3:"),
        ("a,label\n1,0\nx,1\n", ":3:"),
        ("a,label\n1,\n", ":2:"),
        ("a,b\n1,2\n", ":1:"),
        ("", "empty"),
        ("a,label\n", "no data"),
    ],
)
def test_tabular_errors_carry_location(tmp_path, text, where):
    with pytest.raises(DataFormatError, match=where):
        read_tabular(write(tmp_path, text), "label")


def test_scaler_record_kind():
    with pytest.raises(DataFormatError):
        MinMaxScaler.from_json('{"kind": "zscore"}')


# -- IDX --------------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", np.array([1, 0], dtype=np.uint8))
    np.testing.assert_array_equal(read_idx(tmp_path / "img.idx"), images)
    data = load_idx_images(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert data.features.shape == (2, 12) and data.num_classes == 2
    assert data.features.max() == pytest.approx(230 / 255)
    raw = (tmp_path / "img.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and len(raw) == 4 + 12 + 24


def test_idx_length_check(tmp_path):
    write_idx(tmp_path / "img.idx", np.zeros((2, 2, 2), dtype=np.uint8))
    (tmp_path / "img.idx").write_bytes((tmp_path / "img.idx").read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="@16"):
        read_idx(tmp_path / "img.idx")


def test_idx_bad_magic_and_label_count(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01\x00\x00\x00\x00")
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(tmp_path / "bad")
    write_idx(tmp_path / "img.idx", np.zeros((3, 2), dtype=np.uint8))
    write_idx(tmp_path / "lab.idx", np.zeros(2, dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_idx_images(tmp_path / "img.idx", tmp_path / "lab.idx")
