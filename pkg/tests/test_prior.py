import hashlib
import tracemalloc

import h5py
import numpy as np
import pytest

from nanotfm.prior import (
    DumpFormatError,
    PriorDumpDataLoader,
    SyntheticPriorConfig,
    dataset_rng,
    default_dump_name,
    generate_dataset,
    open_dump,
    write_dump,
)

SMALL = SyntheticPriorConfig(rows=20, cols=3, seed=4)


@pytest.fixture(scope="module")
def small_dump(tmp_path_factory):
    path = tmp_path_factory.mktemp("dump") / "small.h5"
    write_dump(path, SMALL, 50, chunk_size=8)
    return path


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- generator -----------------------------------------------------------------------------

@pytest.mark.parametrize("cfg", [SyntheticPriorConfig(), SyntheticPriorConfig(rows=31, cols=1, num_classes=3)])
def test_generate_shapes_and_labels(cfg):
    x, y = generate_dataset(cfg, dataset_rng(0, 0))
    assert x.shape == (cfg.rows, cfg.cols) and x.dtype == np.float32
    assert y.shape == (cfg.rows,)
    assert y.min() >= 0 and y.max() < cfg.num_classes
    assert np.all(np.isfinite(x))


def test_binary_labels_are_balanced():
    cfg = SyntheticPriorConfig()
    for i in range(50):
        _, y = generate_dataset(cfg, dataset_rng(1, i))
        counts = np.bincount(y, minlength=2)
        assert np.all((counts >= 150 // 2 - 1) & (counts <= 150 // 2 + 1))


def test_generator_is_deterministic():
    a = generate_dataset(SyntheticPriorConfig(), dataset_rng(3, 9))
    b = generate_dataset(SyntheticPriorConfig(), dataset_rng(3, 9))
    c = generate_dataset(SyntheticPriorConfig(), dataset_rng(3, 10))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_labels_depend_on_features():
    # a least-squares read-out should beat chance comfortably on average
    cfg = SyntheticPriorConfig()
    accs = []
    for i in range(20):
        x, y = generate_dataset(cfg, dataset_rng(5, i))
        feats = np.c_[x, x**2, np.ones(len(x))]
        w, *_ = np.linalg.lstsq(feats[:100], y[:100] * 2.0 - 1, rcond=None)
        accs.append(np.mean((feats[100:] @ w > 0) == (y[100:] == 1)))
    assert np.mean(accs) > 0.7


@pytest.mark.parametrize("kw", [dict(rows=5), dict(cols=0), dict(num_classes=1), dict(noise_scale=-1.0)])
def test_prior_config_validation(kw):
    with pytest.raises(ValueError):
        SyntheticPriorConfig(**kw)


# --- dump files --------------------------------------------------------------------------------

def test_dump_layout(small_dump):
    with h5py.File(small_dump, "r") as f:
        assert f["X"].dtype == np.dtype("<f4") and f["X"].shape == (50, 20, 3)
        assert f["y"].dtype == np.dtype("<i2") and f["y"].shape == (50, 20)
        assert f["X"].chunks[0] == 8 and f["X"].chunks[1:] == (20, 3)
        assert {k: int(v) for k, v in f.attrs.items()} == {
            "rows": 20, "cols": 3, "num_classes": 2, "format_version": 1, "generator_seed": 4,
        }


def test_header_round_trip(small_dump):
    with open_dump(small_dump) as d:
        h = d.header
    assert (h.num_datasets, h.rows, h.cols, h.num_classes, h.format_version, h.generator_seed) == (50, 20, 3, 2, 1, 4)


def test_round_trip_is_bit_identical(small_dump):
    with open_dump(small_dump) as d:
        x, y = d.read(np.arange(50))
        x7, y7 = d.read([7])
    for i in range(50):
        gx, gy = generate_dataset(SMALL, dataset_rng(SMALL.seed, i))
        assert np.array_equal(x[i], gx) and np.array_equal(y[i], gy)
    assert np.array_equal(x7[0], x[7]) and np.array_equal(y7[0], y[7])


def test_read_handles_order_and_repeats(small_dump):
    with open_dump(small_dump) as d:
        x, _ = d.read([9, 2, 9, 0])
        ref, _ = d.read(np.arange(10))
    assert np.array_equal(x, ref[[9, 2, 9, 0]])


def test_same_seed_gives_byte_identical_files(tmp_path):
    a, b, c = tmp_path / "a.h5", tmp_path / "b.h5", tmp_path / "c.h5"
    write_dump(a, SMALL, 12)
    write_dump(b, SMALL, 12)
    write_dump(c, SyntheticPriorConfig(rows=20, cols=3, seed=5), 12)
    assert _sha(a) == _sha(b)
    assert _sha(a) != _sha(c)


def test_default_name():
    assert default_dump_name(SyntheticPriorConfig()) == "dump_150x5_2.h5"


def test_write_error_names_path(tmp_path):
    bad = tmp_path / "no" / "such" / "dir" / "d.h5"
    with pytest.raises(OSError, match="no/such/dir"):
        write_dump(bad, SMALL, 2)


@pytest.mark.parametrize("broken", ["drop_y", "drop_attr", "version", "shape"])
def test_malformed_dump_is_rejected(tmp_path, broken):
    path = tmp_path / "m.h5"
    write_dump(path, SMALL, 4)
    with h5py.File(path, "a") as f:
        if broken == "drop_y":
            del f["y"]
        elif broken == "drop_attr":
            del f.attrs["num_classes"]
        elif broken == "version":
            f.attrs["format_version"] = np.int64(99)
        else:
            f.attrs["rows"] = np.int64(21)
    with pytest.raises(DumpFormatError, match="y'|num_classes|format_version|shape"):
        open_dump(path)


def test_non_hdf5_file_is_rejected(tmp_path):
    p = tmp_path / "junk.h5"
    p.write_bytes(b"not an hdf5 file")
    with pytest.raises(DumpFormatError):
        open_dump(p)


# --- loader ---------------------------------------------------------------------------------

def test_loader_batches_and_splits(small_dump):
    ld = PriorDumpDataLoader(small_dump, num_steps=30, batch_size=8, seed=1)
    batches = list(ld)
    assert len(batches) == 30 and ld.draws == 240
    for b in batches:
        assert b.x.shape == (8, 20, 3) and b.y.shape == (8, 20)
        assert 2 <= b.split <= 18
    assert {b.split for b in batches} != {batches[0].split}
    ld.close()


def test_split_is_uniform_over_ten_to_ninety_percent(small_dump):
    ld = PriorDumpDataLoader(small_dump, num_steps=3000, batch_size=1, seed=0)
    assert ld.split_range == (2, 18)
    splits = np.array([ld.split_at(t) for t in range(3000)])
    counts = np.bincount(splits, minlength=19)[2:]
    assert splits.min() == 2 and splits.max() == 18
    assert counts.min() > 3000 / 17 * 0.6
    ld.close()


def test_loader_without_replacement_within_epoch(small_dump):
    ld = PriorDumpDataLoader(small_dump, num_steps=20, batch_size=5, seed=2)
    first_epoch = np.concatenate([ld.indices_at(t) for t in range(10)])
    second_epoch = np.concatenate([ld.indices_at(t) for t in range(10, 20)])
    assert sorted(first_epoch) == list(range(50)) and sorted(second_epoch) == list(range(50))
    assert not np.array_equal(first_epoch, second_epoch)
    ld.close()


def test_loader_is_deterministic_and_resumable(small_dump):
    a = PriorDumpDataLoader(small_dump, 12, 4, seed=3)
    b = PriorDumpDataLoader(small_dump, 12, 4, seed=3, prefetch=0)
    full = list(a)
    tail = list(b.iterate(5))
    assert len(tail) == 7
    for u, v in zip(full[5:], tail):
        assert u.split == v.split and np.array_equal(u.x, v.x) and np.array_equal(u.y, v.y)
    c = PriorDumpDataLoader(small_dump, 12, 4, seed=4)
    assert any(not np.array_equal(u.x, v.x) for u, v in zip(full, c))
    for ld in (a, b, c):
        ld.close()


def test_loader_reference_configuration_shapes(tmp_path):
    path = tmp_path / default_dump_name(SyntheticPriorConfig())
    write_dump(path, SyntheticPriorConfig(), 64)
    ld = PriorDumpDataLoader(path, num_steps=2500, batch_size=32, seed=0)
    n = 0
    for b in ld:
        assert b.x.shape == (32, 150, 5) and b.y.shape == (32, 150)
        n += 1
        if n == 3:
            break
    assert len(ld) == 2500
    ld.close()


def test_loader_stops_early_iteration_cleanly(small_dump):
    ld = PriorDumpDataLoader(small_dump, 100, 4, seed=0)
    it = ld.iterate()
    next(it)
    it.close()
    assert ld.draws == 4
    ld.close()


def test_loader_rejects_bad_batch_size(small_dump):
    with pytest.raises(ValueError):
        PriorDumpDataLoader(small_dump, 1, 51)


def test_loader_memory_is_independent_of_file_size(tmp_path):
    cfg = SyntheticPriorConfig(rows=40, cols=4)
    small, large = tmp_path / "s.h5", tmp_path / "l.h5"
    write_dump(small, cfg, 200, chunk_size=16)
    write_dump(large, cfg, 2000, chunk_size=16)
    peaks = []
    for path in (small, large):
        ld = PriorDumpDataLoader(path, num_steps=40, batch_size=8, seed=0, prefetch=0)
        tracemalloc.start()
        for _ in ld:
            pass
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
        ld.close()
    file_ratio = large.stat().st_size / small.stat().st_size
    assert file_ratio > 8
    # the permutation (8 bytes per table) is the only per-file cost; it stays far below the data
    assert peaks[1] < 2 * peaks[0] + 64 * 1024
