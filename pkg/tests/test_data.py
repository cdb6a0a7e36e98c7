import dataclasses
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alloflow.data import (
    DataError,
    DataSpec,
    DegradeSpec,
    PairedDataset,
    SampleSet,
    build_dataset,
    degrade,
    load_points,
    sample_clean,
)


def test_spec_validation():
    with pytest.raises(DataError):
        DataSpec(kind="ring_mixture", dim=3)
    with pytest.raises(DataError):
        DataSpec(kind="grid_image", dim=10, side=3)
    with pytest.raises(DataError):
        DataSpec(kind="grid_image", dim=15, side=4)
    with pytest.raises(DataError):
        DataSpec(kind="blobs")
    with pytest.raises(DataError):
        DegradeSpec(contraction=0.0)
    with pytest.raises(DataError):
        DegradeSpec(noise_std=-1.0)
    with pytest.raises(DataError):
        sample_clean(DataSpec(), 0)


def test_zero_variance_ring_sits_on_modes():
    pts = sample_clean(DataSpec(n_modes=8, mode_std=0.0, radius=1.5, seed=3), 500)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.5, rtol=1e-14)
    k = np.arctan2(pts[:, 1], pts[:, 0]) / (2 * np.pi / 8)
    np.testing.assert_allclose(k, np.round(k), atol=1e-12)
    assert len(np.unique(np.round(k) % 8)) == 8


def test_ring_mean_near_origin():
    pts = sample_clean(DataSpec(mode_std=0.1, seed=0), 10000)
    # per-coordinate std is about 0.71 / sqrt(10000) = 0.007
    assert np.linalg.norm(pts.mean(axis=0)) < 0.05


def test_same_seed_same_samples():
    spec = DataSpec(seed=9)
    assert np.array_equal(sample_clean(spec, 50), sample_clean(spec, 50))
    assert not np.array_equal(sample_clean(spec, 50), sample_clean(dataclasses.replace(spec, seed=10), 50))


def test_grid_image_patterns():
    spec = DataSpec(kind="grid_image", dim=16, side=4, seed=1)
    x = sample_clean(spec, 4000)
    assert x.shape == (4000, 16) and np.all(np.isfinite(x))
    # random phases make the ensemble zero-mean
    assert np.max(np.abs(x.mean(axis=0))) < 0.1
    assert np.array_equal(x, sample_clean(spec, 4000))


def test_degrade_examples():
    rng = np.random.default_rng(0)
    z = np.array([2.0, -4.0])
    np.testing.assert_array_equal(degrade(z, DegradeSpec(1.0, 0.0), np.zeros(2), rng), z)
    np.testing.assert_allclose(degrade(z, DegradeSpec(0.5, 0.0), np.zeros(2), rng), [1.0, -2.0])
    np.testing.assert_allclose(degrade(z, DegradeSpec(0.5, 0.0), np.array([1.0, 1.0]), rng), [1.5, -1.5])


def test_degrade_residual_power_oracle():
    z = sample_clean(DataSpec(seed=0), 10000)
    zl = degrade(z, DegradeSpec(1.0, 0.3), np.zeros(2), np.random.default_rng(1))
    assert np.mean(np.sum((zl - z) ** 2, axis=1)) == pytest.approx(2 * 0.09, rel=0.05)


def test_residual_monotone_in_noise():
    spec = DataSpec(seed=2)
    prev = -1.0
    for sigma in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8]:
        r = build_dataset(spec, DegradeSpec(0.8, sigma, seed=5), 10000).residual_power()
        assert r >= prev
        prev = r


def test_build_dataset_identity_and_provenance():
    ds = build_dataset(DataSpec(seed=1), DegradeSpec(1.0, 0.0, seed=2), 100)
    assert np.array_equal(ds.z_l, ds.z_h)
    ds = build_dataset(DataSpec(seed=1), DegradeSpec(0.8, 0.2, seed=2), 100)
    recomputed = np.mean(np.sum((ds.z_l - ds.z_h) ** 2, axis=1))
    assert abs(ds.provenance["residual_power"] - recomputed) < 1e-12
    assert ds.provenance["data"]["seed"] == 1 and ds.provenance["degrade"]["noise_std"] == 0.2
    assert len(ds) == 100 and ds.dim == 2
    assert np.array_equal(ds[3].z_h, ds.z_h[3]) and len(ds.samples) == 100


def test_dataset_bytes_are_deterministic():
    a = build_dataset(DataSpec(seed=1), DegradeSpec(seed=2), 64).to_bytes()
    b = build_dataset(DataSpec(seed=1), DegradeSpec(seed=2), 64).to_bytes()
    assert a == b


@given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_dataset_round_trip_bit_exact(n, d, seed):
    rng = np.random.default_rng(seed)
    ds = PairedDataset(rng.standard_normal((n, d)) * 1e3, rng.standard_normal((n, d)), {"seed": seed})
    back = PairedDataset.from_bytes(ds.to_bytes())
    assert np.array_equal(back.z_h, ds.z_h) and np.array_equal(back.z_l, ds.z_l)
    assert back.provenance == {"seed": seed}


def test_dataset_file_layout(tmp_path):
    ds = PairedDataset([[1.0, 2.0]], [[3.0, 4.0]], {"a": 1})
    blob = ds.to_bytes()
    assert blob[:4] == b"AFDS"
    assert struct.unpack_from("<IIQ", blob, 4) == (1, 2, 1)
    (plen,) = struct.unpack_from("<I", blob, 20)
    assert blob[24:24 + plen] == b'{"a":1}'
    assert struct.unpack_from("<4d", blob, 24 + plen) == (1.0, 2.0, 3.0, 4.0)
    ds.save(tmp_path / "d.afds")
    assert PairedDataset.load(tmp_path / "d.afds").provenance == {"a": 1}


def test_dataset_errors():
    with pytest.raises(DataError):
        PairedDataset(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(DataError):
        PairedDataset(np.zeros((3, 2)), np.zeros((3, 3)))
    blob = PairedDataset([[1.0, 2.0]], [[3.0, 4.0]]).to_bytes()
    with pytest.raises(DataError, match="magic"):
        PairedDataset.from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DataError, match="version"):
        PairedDataset.from_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(DataError):
        PairedDataset.from_bytes(blob[:-1])
    with pytest.raises(DataError):
        PairedDataset.from_bytes(blob[:10])


def test_sample_set_and_load_points(tmp_path):
    pts = np.random.default_rng(0).standard_normal((7, 3))
    s = SampleSet(pts, {"kind": "samples"})
    s.save(tmp_path / "s.afsm")
    back = SampleSet.load(tmp_path / "s.afsm")
    assert np.array_equal(back.points, pts) and back.provenance == {"kind": "samples"}
    assert np.array_equal(load_points(tmp_path / "s.afsm"), pts)
    ds = PairedDataset(pts, pts + 1)
    ds.save(tmp_path / "d.afds")
    assert np.array_equal(load_points(tmp_path / "d.afds"), pts)
    with pytest.raises(DataError):
        SampleSet.from_bytes(s.to_bytes()[:-8])
