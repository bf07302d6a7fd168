import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdpoison import datasets as D
from fdpoison import nn
from fdpoison.errors import ConfigError, InputError, ParseError


# -- synthetic -------------------------------------------------------------

def test_synthetic_is_deterministic():
    a_tr, a_te = D.generate_synthetic(5, 20, 4, 2.0, seed=9)
    b_tr, b_te = D.generate_synthetic(5, 20, 4, 2.0, seed=9)
    assert a_tr.features.tobytes() == b_tr.features.tobytes()
    assert np.array_equal(a_te.labels, b_te.labels)


def test_synthetic_split_is_stratified_80_20():
    tr, te = D.generate_synthetic(10, 100, 16, 3.0, seed=0)
    assert len(tr) == 800 and len(te) == 200
    assert tr.class_counts().tolist() == [80] * 10
    assert te.class_counts().tolist() == [20] * 10
    assert (tr.split, te.split) == ("train", "test")


def test_class_means_pairwise_distance():
    m = D.class_means(10, 16, 3.0, np.random.default_rng(0))
    d = np.linalg.norm(m[:, None] - m[None, :], axis=-1)
    off = d[~np.eye(10, dtype=bool)]
    np.testing.assert_allclose(off, 6.0, rtol=1e-12)


def test_separation_five_centroid_oracle():
    tr, te = D.generate_synthetic(10, 100, 16, 5.0, seed=3)
    acc = np.mean(D.nearest_centroid_predict(tr, te.features) == te.labels)
    assert acc >= 0.95


def test_separation_zero_is_chance_level():
    tr, te = D.generate_synthetic(10, 200, 16, 0.0, seed=4)
    net = nn.make_model("A1", 16, 10, 0)
    rng = np.random.default_rng(0)
    for _ in range(3):
        for idx in np.array_split(rng.permutation(len(tr)), len(tr) // 32):
            net, _ = nn.backward_and_step(net, tr.features[idx], tr.labels[idx], lr=0.05)
    acc = np.mean(np.argmax(nn.forward(net, te.features), axis=1) == te.labels)
    assert abs(acc - 0.1) <= 0.1


def test_synthetic_rejects_bad_args():
    with pytest.raises(ConfigError):
        D.generate_synthetic(0, 10, 2, 1.0, 0)
    with pytest.raises(ConfigError):
        D.generate_synthetic(3, 10, 2, -1.0, 0)


def test_dataset_validation():
    with pytest.raises(InputError):
        D.Dataset(np.zeros((2, 3)), [0, 5], 3)
    with pytest.raises(InputError):
        D.Dataset(np.zeros((0, 3)), [], 3)
    with pytest.raises(InputError):
        D.Dataset(np.array([[np.nan]]), [0], 1)


# -- IDX -------------------------------------------------------------------

def _idx_bytes(code, dims, payload):
    return struct.pack(">BBBB", 0, 0, code, len(dims)) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_load_idx_three_2x2_images(tmp_path):
    pixels = bytes([0, 255, 51, 102, 10, 20, 30, 40, 255, 255, 0, 0])
    (tmp_path / "img").write_bytes(_idx_bytes(0x08, (3, 2, 2), pixels))
    (tmp_path / "lab").write_bytes(_idx_bytes(0x08, (3,), bytes([2, 0, 1])))
    ds = D.load_idx(tmp_path / "img", tmp_path / "lab")
    assert (len(ds), ds.dim, ds.n_classes) == (3, 4, 3)
    np.testing.assert_allclose(ds.features[0], [0.0, 1.0, 0.2, 0.4])
    assert ds.labels.tolist() == [2, 0, 1]


def test_load_idx_gzip(tmp_path):
    (tmp_path / "img.gz").write_bytes(gzip.compress(_idx_bytes(0x08, (1, 1, 2), bytes([0, 255]))))
    (tmp_path / "lab.gz").write_bytes(gzip.compress(_idx_bytes(0x08, (1,), bytes([0]))))
    ds = D.load_idx(tmp_path / "img.gz", tmp_path / "lab.gz", n_classes=2)
    assert ds.features.tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("blob, offset", [
    (b"\x01\x00\x08\x01" + b"\x00" * 8, 0),
    (b"\x00\x00\x07\x01" + b"\x00" * 8, 2),
    (b"\x00\x00\x08\x02\x00\x00", 6),
    (_idx_bytes(0x08, (2, 2), bytes(3)), 15),
    (_idx_bytes(0x08, (1, 2), bytes(3)), 14),
])
def test_read_idx_malformed_names_offset(tmp_path, blob, offset):
    (tmp_path / "bad").write_bytes(blob)
    with pytest.raises(ParseError) as err:
        D.read_idx(tmp_path / "bad")
    assert err.value.offset == offset
    assert f"byte {offset}" in str(err.value)


def test_idx_label_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(0x08, (2, 1, 1), bytes(2)))
    (tmp_path / "lab").write_bytes(_idx_bytes(0x08, (3,), bytes(3)))
    with pytest.raises(ParseError):
        D.load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = D.Dataset(rng.integers(0, 256, (5, 6)) / 255.0, rng.integers(0, 4, 5), 4)
    D.export_idx(ds, tmp_path / "i", tmp_path / "l", image_shape=(2, 3))
    back = D.load_idx(tmp_path / "i", tmp_path / "l", n_classes=4)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


# -- CSV -------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    tr, _ = D.generate_synthetic(3, 5, 4, 1.0, seed=1)
    scaled = D.Dataset((tr.features - tr.features.min()) / np.ptp(tr.features), tr.labels, 3)
    D.export_csv(scaled, tmp_path / "d.csv")
    back = D.load_csv(tmp_path / "d.csv", D.CsvSchema(n_classes=3))
    np.testing.assert_array_equal(back.features, scaled.features)
    np.testing.assert_array_equal(back.labels, scaled.labels)


def test_csv_label_out_of_range(tmp_path):
    (tmp_path / "d.csv").write_text("a,label,b\n0.1,0,0.2\n0.3,7,0.4\n")
    with pytest.raises(ParseError) as err:
        D.load_csv(tmp_path / "d.csv", D.CsvSchema(n_classes=3))
    assert err.value.offset == 3 and "line 3" in str(err.value)


def test_csv_value_range_scaling(tmp_path):
    (tmp_path / "d.csv").write_text("label,p\n1,255\n0,0\n")
    ds = D.load_csv(tmp_path / "d.csv", D.CsvSchema(value_range=(0, 255)))
    assert ds.features.ravel().tolist() == [1.0, 0.0]


@pytest.mark.parametrize("text, line", [
    ("x,y\n1,2\n", 1),
    ("label,x\n0,abc\n", 2),
    ("label,x\n0,0.5\n1\n", 3),
    ("label,x\n0,1.5\n", 2),
])
def test_csv_malformed(tmp_path, text, line):
    (tmp_path / "d.csv").write_text(text)
    with pytest.raises(ParseError) as err:
        D.load_csv(tmp_path / "d.csv")
    assert err.value.offset == line


# -- partition -------------------------------------------------------------

def test_single_client_gets_everything():
    labels = np.arange(50) % 5
    p = D.dirichlet_partition(labels, 1, 0.5, seed=0)
    assert sorted(p.assignments[0].tolist()) == list(range(50))


def test_too_many_clients():
    with pytest.raises(ConfigError):
        D.dirichlet_partition(np.zeros(3, dtype=int), 4, 1.0, 0)


def test_bad_alpha():
    with pytest.raises(ConfigError):
        D.dirichlet_partition(np.zeros(3, dtype=int), 2, 0.0, 0)


@settings(max_examples=60, deadline=None)
@given(K=st.integers(1, 200), alpha=st.sampled_from([0.1, 0.5, 1.0, 3.0, 1000.0]),
       seed=st.integers(0, 10_000))
def test_partition_disjoint_exhaustive_nonempty(K, alpha, seed):
    labels = np.arange(800) % 10
    p = D.dirichlet_partition(labels, K, alpha, seed)
    flat = np.concatenate(p.assignments)
    assert flat.size == 800 and np.unique(flat).size == 800
    assert p.sizes().min() >= 1 and p.sizes().sum() == 800


def test_partition_deterministic():
    labels = np.arange(300) % 6
    a = D.dirichlet_partition(labels, 7, 0.5, 11)
    b = D.dirichlet_partition(labels, 7, 0.5, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_large_alpha_matches_global_histogram():
    labels = np.arange(10_000) % 10
    glob = np.bincount(labels) / labels.size
    for seed in range(5):
        p = D.dirichlet_partition(labels, 10, 1000.0, seed)
        hists = p.class_histograms(labels, 10)
        props = hists / hists.sum(axis=1, keepdims=True)
        assert np.all(np.abs(props - glob) <= 0.10)


def test_entropy_non_decreasing_in_alpha():
    labels = np.arange(800) % 10
    ent = [
        np.mean([D.mean_client_entropy(D.dirichlet_partition(labels, 20, a, s), labels, 10)
                 for s in range(10)])
        for a in (0.5, 1.0, 3.0)
    ]
    assert ent[0] <= ent[1] <= ent[2]


def test_empty_client_repair_moves_from_largest():
    # 2 samples, 2 clients, a tiny alpha almost surely gives one client both
    p = D.dirichlet_partition(np.array([0, 0]), 2, 0.01, seed=0)
    assert p.sizes().tolist() == [1, 1]


# -- hashing ---------------------------------------------------------------

def test_hash_deterministic_and_unit_norm(rng):
    x = rng.normal(size=16)
    h1 = D.compute_hash(x, 5)
    h2 = D.compute_hash(x.copy(), 5)
    assert h1.tobytes() == h2.tobytes()
    assert h1.shape == (32,)
    assert abs(np.linalg.norm(h1) - 1) <= 1e-9


def test_hash_zero_vector_is_first_basis():
    h = D.compute_hash(np.zeros(8), 1, hash_dim=4)
    assert h.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_hash_dim_validation():
    with pytest.raises(ConfigError):
        D.compute_hash(np.ones(3), 0, hash_dim=1)


def test_hash_continuity(rng):
    x = rng.normal(size=16)
    direction = rng.normal(size=16)
    direction /= np.linalg.norm(direction)
    sims = [float(D.compute_hash(x, 2) @ D.compute_hash(x + eps * direction, 2))
            for eps in (1.0, 1e-1, 1e-2, 1e-3, 1e-5)]
    assert sims[-1] > 1 - 1e-9
    assert all(b >= a - 1e-12 for a, b in zip(sims, sims[1:]))


def test_batch_hashes_match_single(rng):
    x = rng.normal(size=(5, 6))
    batch = D.compute_hashes(x, 3, 8)
    for row, h in zip(x, batch):
        np.testing.assert_allclose(D.compute_hash(row, 3, 8), h, atol=1e-15)
