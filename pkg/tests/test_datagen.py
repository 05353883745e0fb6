from dataclasses import replace

import numpy as np
import pytest

from cdcnn.datagen import (HOURS, DatasetFormatError, DatasetVersionError, GenConfig, Truths,
                           coverage_mask, export_dataset, gen_block, gen_dataset, gen_resident,
                           import_dataset, null_signal, sample_truths, spatial_priors,
                           stratified_indices)

TINY = GenConfig(n_residents=120, n_validation=40, labeled_fraction=0.25, days=3)


def test_noiseless_single_day_is_one_hot():
    cfg = replace(TINY, noise_level=0.0, days=1)
    mask = coverage_mask(cfg)
    truths = sample_truths(cfg, 5, mask)
    for k in range(5):
        Rh, Rw, _ = gen_resident(truths.subset(slice(k, k + 1)), cfg, np.random.default_rng(k), mask)
        for R, zone in ((Rh, truths.home[k]), (Rw, truths.work[k])):
            assert np.count_nonzero(R) == 1
            assert R[tuple(zone)] == 1.0


def test_feature_bounds(small_dataset):
    for res in (small_dataset.labeled, small_dataset.unlabeled, small_dataset.validation):
        assert res.R.min() >= 0 and res.R.max() <= 1
        assert res.U.min() >= 0 and res.U.max() <= 1
        assert np.all(res.R.sum(axis=(2, 3)) <= 1 + 1e-12)


def test_communication_rows_normalised(small_dataset):
    U = np.concatenate([small_dataset.labeled.U, small_dataset.unlabeled.U, small_dataset.validation.U])
    events = small_dataset.truths.has_events
    np.testing.assert_allclose(U[events].sum(axis=2), 1.0)
    assert np.all(U[~events].sum(axis=2) <= 1 + 1e-12)


def test_uncovered_zones_are_empty(small_dataset):
    off = ~small_dataset.coverage
    assert off.any()
    for res in (small_dataset.labeled, small_dataset.unlabeled):
        assert np.all(res.R[:, :, off] == 0)


def test_zones_lie_on_covered_cells(small_dataset):
    t = small_dataset.truths
    assert small_dataset.coverage[t.home[:, 0], t.home[:, 1]].all()
    assert small_dataset.coverage[t.work[:, 0], t.work[:, 1]].all()


def test_priors_are_distributions():
    mask = coverage_mask(TINY)
    for name, p in spatial_priors(TINY, mask).items():
        assert p.sum() == pytest.approx(1.0), name
        assert np.all(p[~mask] == 0)


def test_split_sizes_and_labels(small_dataset):
    c = small_dataset.config
    assert len(small_dataset.labeled) == c.n_labeled
    assert len(small_dataset.labeled) + len(small_dataset.unlabeled) == c.n_residents
    assert len(small_dataset.validation) == c.n_validation
    np.testing.assert_array_equal(small_dataset.labels, small_dataset.truth("labeled").label)
    frac = small_dataset.labels.mean()
    assert abs(frac - small_dataset.truths.label[:c.n_residents].mean()) < 0.02


def test_splits_disjoint():
    # residents are identified by their generation index; regenerate it
    ds = gen_dataset(TINY)
    pool = np.concatenate([ds.labeled.R, ds.unlabeled.R]).reshape(TINY.n_residents, -1)
    assert len({row.tobytes() for row in pool}) == TINY.n_residents
    s = ds.splits
    assert s["labeled"].stop == s["unlabeled"].start and s["unlabeled"].stop == s["validation"].start


def test_all_labeled_gives_empty_pool():
    ds = gen_dataset(replace(TINY, labeled_fraction=1.0))
    assert len(ds.unlabeled) == 0


def test_too_few_labels():
    with pytest.raises(ValueError, match="stratify"):
        gen_dataset(replace(TINY, labeled_fraction=0.005))


def test_seeded_and_bitwise_identical():
    assert gen_dataset(TINY).equals(gen_dataset(TINY))
    assert not gen_dataset(TINY).equals(gen_dataset(replace(TINY, seed=1)))


def test_truths_do_not_depend_on_days():
    a = sample_truths(TINY, 50)
    b = sample_truths(replace(TINY, days=17), 50)
    for name in ("label", "home", "work", "call_peak", "leaving"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_migrant_call_peak_later():
    cfg = replace(TINY, migrant_prior=0.5, days=20)
    mask = coverage_mask(cfg)
    t = sample_truths(cfg, 20000, mask)
    _, U, _ = gen_block(t, cfg, np.random.default_rng(0), mask)
    peak = lambda sel: np.argmax(U[sel, 0].mean(axis=0))
    assert peak(t.label == 1) - peak(t.label == 0) >= 1


def test_null_signal_removes_asymmetry():
    cfg = null_signal(TINY)
    p = spatial_priors(cfg, coverage_mask(cfg))
    np.testing.assert_allclose(p["migrant_home"], p["native_home"])
    np.testing.assert_allclose(p["migrant_work"], p["native_work"])
    assert cfg.peak_shift_hours == 0


def test_stratified_indices():
    labels = np.array([1] * 30 + [0] * 70)
    idx = stratified_indices(labels, 10, np.random.default_rng(0))
    assert len(set(idx)) == 10 and labels[idx].sum() == 3
    with pytest.raises(ValueError):
        stratified_indices(labels, 101, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", [
    {"I": 0}, {"labeled_fraction": 1.5}, {"migrant_prior": 1.0}, {"days": 0},
    {"noise_level": 2.0}, {"station_coverage": 0.0}, {"industrial_zones": ((30, 1),)},
    {"enclave_leak": 0.7},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GenConfig(**kwargs)


def test_config_dict_roundtrip():
    assert GenConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ValueError, match="unknown"):
        GenConfig.from_dict({**TINY.to_dict(), "colour": 1})


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        ds = gen_dataset(TINY)
        path = tmp_path / "d.cdds"
        export_dataset(ds, path)
        back = import_dataset(path)
        assert back.equals(ds)
        np.testing.assert_array_equal(back.truths.leaving, ds.truths.leaving)

    def test_export_is_byte_identical(self, tmp_path):
        export_dataset(gen_dataset(TINY), tmp_path / "a")
        export_dataset(gen_dataset(TINY), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        export_dataset(gen_dataset(TINY), tmp_path / "a")
        data = (tmp_path / "a").read_bytes()
        for cut in (6, 30, len(data) // 2, len(data) - 3):
            (tmp_path / "t").write_bytes(data[:cut])
            with pytest.raises(DatasetFormatError, match="section"):
                import_dataset(tmp_path / "t")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(DatasetVersionError):
            import_dataset(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        export_dataset(gen_dataset(TINY), tmp_path / "a")
        data = bytearray((tmp_path / "a").read_bytes())
        data[4] = 9
        (tmp_path / "v").write_bytes(bytes(data))
        with pytest.raises(DatasetVersionError, match="version"):
            import_dataset(tmp_path / "v")

    def test_trailing_bytes(self, tmp_path):
        export_dataset(gen_dataset(TINY), tmp_path / "a")
        (tmp_path / "b").write_bytes((tmp_path / "a").read_bytes() + b"\0")
        with pytest.raises(DatasetFormatError, match="trailing"):
            import_dataset(tmp_path / "b")

    def test_unknown_config_key(self, tmp_path):
        import json
        import struct
        cfg = json.dumps({**TINY.to_dict(), "bogus": 1}).encode()
        (tmp_path / "c").write_bytes(b"CDDS" + struct.pack("<II", 1, len(cfg)) + cfg)
        with pytest.raises(DatasetFormatError, match="config"):
            import_dataset(tmp_path / "c")


def test_truths_subset_keeps_fields():
    t = sample_truths(TINY, 10)
    sub = t.subset(slice(2, 5))
    assert isinstance(sub, Truths) and len(sub) == 3
    assert HOURS == 24
