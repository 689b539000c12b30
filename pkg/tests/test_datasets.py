import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmil.datasets import (
    Bag,
    BagDataset,
    SyntheticSpec,
    generate_synthetic,
    load_bags,
    load_mnist,
    save_bags,
    split_dataset,
)
from fedmil.errors import (
    ChecksumError,
    ConfigError,
    MagicMismatchError,
    MissingFileError,
    TruncatedFileError,
    VersionMismatchError,
)


def test_empty_synthetic_rejected():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_bags=0)


@pytest.mark.parametrize("field,value", [("class_separation", 0.0), ("feature_dim", 0),
                                         ("num_latent_clusters", -1), ("num_classes", 1)])
def test_invalid_spec_fields(field, value):
    with pytest.raises(ConfigError):
        SyntheticSpec(num_bags=10, **{field: value})


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_bags=30, instances_per_bag=6, rng_seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.latent, b.latent)
    assert generate_synthetic(SyntheticSpec(num_bags=30, instances_per_bag=6, rng_seed=8)) != a


def test_synthetic_shapes():
    ds = generate_synthetic(SyntheticSpec(num_bags=25, rng_seed=1))
    assert len(ds) == 25
    assert ds.feature_dim == 64 and ds.num_classes == 2
    assert all(bag.instances.shape == (50, 64) for bag in ds)
    assert ds.features.dtype == np.float32
    assert set(np.unique(ds.labels)) <= {0, 1}
    assert ds.latent.min() >= 0 and ds.latent.max() < 10


def test_synthetic_class_weights():
    ds = generate_synthetic(SyntheticSpec(num_bags=3000, instances_per_bag=1, feature_dim=2,
                                          class_weights=(2.0, 1.0), rng_seed=2))
    assert abs(ds.labels.mean() - 1 / 3) < 0.03


def test_multiclass_synthetic():
    ds = generate_synthetic(SyntheticSpec(num_bags=50, num_classes=4, instances_per_bag=3,
                                          feature_dim=8, rng_seed=0))
    assert ds.num_classes == 4 and ds.labels.max() < 4


def test_dataset_invariants_enforced():
    good = Bag(np.zeros((2, 3), np.float32), 0, 1)
    with pytest.raises(Exception):
        BagDataset.from_bags([good, Bag(np.zeros((2, 4), np.float32), 0, 2)], num_classes=2)
    with pytest.raises(Exception):
        BagDataset.from_bags([good, Bag(np.zeros((2, 3), np.float32), 0, 1)], num_classes=2)
    with pytest.raises(Exception):
        BagDataset.from_bags([Bag(np.zeros((2, 3), np.float32), 5, 1)], num_classes=2)


def test_subset_and_groups(small_ds):
    sub = small_ds.subset([5, 2, 9])
    assert [b.bag_id for b in sub] == [small_ds[5].bag_id, small_ds[2].bag_id, small_ds[9].bag_id]
    assert sub[1] == small_ds[2]
    mixed = BagDataset.from_bags([Bag(np.ones((n, 2), np.float32) * n, n % 2, i) for i, n in enumerate((1, 3, 1, 2))],
                                 num_classes=2)
    seen = {}
    for pos, X, y in mixed.groups():
        for p, x in zip(pos, X):
            seen[int(p)] = x
    assert sorted(seen) == [0, 1, 2, 3]
    assert seen[1].shape == (3, 2) and np.all(seen[1] == 3)


def test_split_dataset(small_ds):
    train, test = split_dataset(small_ds, 0.25, 0)
    assert len(test) == 30 and len(train) == 90
    assert set(train.bag_ids).isdisjoint(test.bag_ids)
    assert train.split == "train" and test.split == "test"


# --- FBAG -----------------------------------------------------------------------

def test_fbag_round_trip(tmp_path, small_ds):
    path = tmp_path / "ds.fbag"
    save_bags(small_ds, path)
    assert load_bags(path) == small_ds


def test_fbag_header_layout(tmp_path, small_ds):
    path = tmp_path / "ds.fbag"
    save_bags(small_ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FBAG"
    version, num_bags, d, k = struct.unpack_from("<IQII", raw, 4)
    assert (version, num_bags, d, k) == (1, 120, 5, 2)
    # first record: bag id, label, n, then little-endian float32 rows
    bag_id, label, n = struct.unpack_from("<qII", raw, 25)
    assert (bag_id, label, n) == (small_ds[0].bag_id, small_ds[0].label, 4)
    first = np.frombuffer(raw, "<f4", count=n * d, offset=25 + 16).reshape(n, d)
    assert np.array_equal(first, small_ds[0].instances)


def test_fbag_empty(tmp_path):
    empty = BagDataset.from_bags([], num_classes=2, feature_dim=7)
    path = tmp_path / "empty.fbag"
    save_bags(empty, path)
    loaded = load_bags(path)
    assert len(loaded) == 0 and loaded.feature_dim == 7 and loaded == empty


def test_fbag_truncated_names_bag(tmp_path, small_ds):
    path = tmp_path / "ds.fbag"
    save_bags(small_ds, path)
    raw = path.read_bytes()
    record = 16 + 4 * 4 * 5
    # cut in the middle of bag 3's feature block
    cut = 25 + 3 * record + 16 + 10
    (tmp_path / "cut.fbag").write_bytes(raw[:cut])
    with pytest.raises(TruncatedFileError, match="bag 3"):
        load_bags(tmp_path / "cut.fbag")


def test_fbag_version_and_checksum(tmp_path, small_ds):
    path = tmp_path / "ds.fbag"
    save_bags(small_ds, path)
    raw = bytearray(path.read_bytes())
    bumped = bytearray(raw)
    bumped[4:8] = struct.pack("<I", 99)
    (tmp_path / "v.fbag").write_bytes(bytes(bumped))
    with pytest.raises(VersionMismatchError):
        load_bags(tmp_path / "v.fbag")
    flipped = bytearray(raw)
    flipped[60] ^= 0xFF
    (tmp_path / "c.fbag").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_bags(tmp_path / "c.fbag")
    (tmp_path / "x.fbag").write_bytes(bytes(raw) + b"\0\0")
    with pytest.raises(ChecksumError):
        load_bags(tmp_path / "x.fbag")
    with pytest.raises(MissingFileError):
        load_bags(tmp_path / "nope.fbag")


@settings(max_examples=25, deadline=None)
@given(num_bags=st.integers(1, 12), n=st.integers(1, 5), d=st.integers(1, 6),
       k=st.integers(2, 4), seed=st.integers(0, 2**16))
def test_fbag_round_trip_property(tmp_path_factory, num_bags, n, d, k, seed):
    ds = generate_synthetic(SyntheticSpec(num_bags=num_bags, instances_per_bag=n, feature_dim=d,
                                          num_classes=k, num_latent_clusters=2, rng_seed=seed))
    path = tmp_path_factory.mktemp("fbag") / "p.fbag"
    save_bags(ds, path)
    assert load_bags(path) == ds


# --- MNIST ----------------------------------------------------------------------

def _write_idx(directory, split="train", images=None, labels=None, img_magic=0x803, gz=False):
    images = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28) if images is None else images
    labels = np.array([3, 7], dtype=np.uint8) if labels is None else labels
    prefix = "train" if split == "train" else "t10k"
    img = struct.pack(">IIII", img_magic, images.shape[0], 28, 28) + images.tobytes()
    lbl = struct.pack(">II", 0x801, labels.shape[0]) + labels.tobytes()
    for stem, payload in ((f"{prefix}-images-idx3-ubyte", img), (f"{prefix}-labels-idx1-ubyte", lbl)):
        if gz:
            with gzip.open(directory / (stem + ".gz"), "wb") as fh:
                fh.write(payload)
        else:
            (directory / stem).write_bytes(payload)


def test_mnist_loader_on_crafted_files(tmp_path):
    _write_idx(tmp_path)
    ds = load_mnist(tmp_path)
    assert len(ds) == 2 and ds.feature_dim == 784 and ds.num_classes == 10
    assert list(ds.labels) == [3, 7]
    assert ds[0].instances.shape == (1, 784)
    assert ds[0].instances[0, 5] == np.float32(5 / 255)
    assert ds.features.max() <= 1.0


def test_mnist_gzip(tmp_path):
    _write_idx(tmp_path, gz=True)
    assert len(load_mnist(tmp_path)) == 2


def test_mnist_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_mnist(tmp_path)
    _write_idx(tmp_path, img_magic=0x802)
    with pytest.raises(MagicMismatchError):
        load_mnist(tmp_path)
    _write_idx(tmp_path)
    raw = (tmp_path / "train-images-idx3-ubyte").read_bytes()
    (tmp_path / "train-images-idx3-ubyte").write_bytes(raw[:-100])
    with pytest.raises(TruncatedFileError):
        load_mnist(tmp_path)


def test_mnist_real_train(mnist_dir):
    ds = load_mnist(mnist_dir, "train")
    assert len(ds) == 60000 and ds.feature_dim == 784
    raw = (mnist_dir / "train-labels-idx1-ubyte").read_bytes()
    assert ds.labels[0] == raw[8]
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.tolist() == [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0


def test_mnist_real_test(mnist_dir):
    ds = load_mnist(mnist_dir, "test")
    assert len(ds) == 10000 and ds.split == "test"


@pytest.mark.slow
def test_default_synthetic_is_learnable_centrally():
    from fedmil.metrics import evaluate
    from fedmil.model import LookaheadConfig, ModelConfig, init_params, train_local

    ds = generate_synthetic(SyntheticSpec(num_bags=4500, rng_seed=0))
    train, test = split_dataset(ds, 0.2, 0)
    params, _ = train_local(init_params(ModelConfig(64)), train, np.arange(len(train)),
                            LookaheadConfig(0.5), epochs=60)
    assert evaluate(params, test).accuracy > 0.95
