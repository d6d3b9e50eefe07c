"""Tests for the spike container format, binning, batching, and the planted task."""

import numpy as np
import pytest

from spikedelay.core_math import SeededRng
from spikedelay.datasets import (
    ENC_DENSE,
    ENC_SPARSE,
    DataFormatError,
    PlantedDelaySpec,
    SpikeDataset,
    SpikeSample,
    bin_spatial,
    bin_temporal,
    collate,
    densify,
    events_from_counts,
    generate_planted_delay,
    load_spkds,
    make_batches,
    plant_signatures,
    save_spkds,
    split,
)


def _tiny_sparse():
    events = np.array([(0, 1, 1), (3, 0, 2), (7, 1, 255)], dtype=[("t", "<u2"), ("ch", "<u2"), ("count", "u1")])
    s0 = SpikeSample(duration=9, label=1, events=events)
    s1 = SpikeSample(duration=4, label=0, events=events[:1])
    return SpikeDataset(encoding=ENC_SPARSE, num_channels=2, num_classes=2, delta_t_us=1000, samples=[s0, s1])


def test_sparse_round_trip_bit_exact(tmp_path):
    ds = _tiny_sparse()
    path = tmp_path / "a.spkds"
    save_spkds(str(path), ds)
    first = path.read_bytes()
    back = load_spkds(str(path))
    save_spkds(str(path), back)
    assert path.read_bytes() == first
    assert back.encoding == ENC_SPARSE
    assert back.delta_t_us == 1000
    for a, b in zip(ds.samples, back.samples):
        assert a.duration == b.duration
        assert a.label == b.label
        np.testing.assert_array_equal(a.events, b.events)


def test_dense_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    samples = []
    for dur in (5, 3):
        dense = rng.random((4, dur)).astype(np.float32)
        samples.append(SpikeSample(duration=dur, label=0, events=None, dense=dense))
    ds = SpikeDataset(encoding=ENC_DENSE, num_channels=4, num_classes=1, delta_t_us=10000, samples=samples)
    path = tmp_path / "d.spkds"
    save_spkds(str(path), ds)
    back = load_spkds(str(path))
    for a, b in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(a.dense, b.dense)
        assert b.dense.dtype == np.float32


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.spkds"
    path.write_bytes(b"BOGUS!" + b"\x00" * 20)
    with pytest.raises(DataFormatError):
        load_spkds(str(path))


def test_events_from_counts_sorts_and_splits_overflow():
    counts = np.zeros((2, 4), dtype=np.int64)
    counts[1, 0] = 3
    counts[0, 2] = 300  # must split into 255 + 45
    ev = events_from_counts(counts)
    # lexicographic by (t, ch)
    assert list(ev["t"]) == [0, 2, 2]
    assert list(ev["ch"]) == [1, 0, 0]
    assert list(ev["count"]) == [3, 255, 45]


def test_densify_matches_counts():
    ds = _tiny_sparse()
    dense = densify(ds.samples[0], num_channels=2)
    assert dense.shape == (2, 9)
    assert dense[1, 0] == 1
    assert dense[0, 3] == 2
    assert dense[1, 7] == 255
    assert dense.sum() == 1 + 2 + 255


def test_bin_spatial_groups_channels():
    ds = _tiny_sparse()
    out = bin_spatial(ds, 2)
    assert out.num_channels == 1
    d = densify(out.samples[0], 1)
    np.testing.assert_array_equal(d[0], densify(ds.samples[0], 2).sum(axis=0))


def test_bin_temporal_uses_ceiling_and_scales_delta_t():
    ds = _tiny_sparse()
    out = bin_temporal(ds, 4)
    assert out.delta_t_us == 4000
    assert out.samples[0].duration == 3  # ceil(9/4)
    d = densify(out.samples[0], 2)
    src = densify(ds.samples[0], 2)
    np.testing.assert_array_equal(d[:, 0], src[:, 0:4].sum(axis=1))
    np.testing.assert_array_equal(d[:, 2], src[:, 8:9].sum(axis=1))


def test_collate_pads_and_reports_lengths():
    ds = _tiny_sparse()
    batch = collate(ds, [0, 1])
    assert batch.data.shape == (2, 2, 9)
    np.testing.assert_array_equal(batch.valid_lengths, [9, 4])
    np.testing.assert_array_equal(batch.labels, [1, 0])
    # padding beyond each sample's duration stays zero
    assert batch.data[1, :, 4:].sum() == 0


def test_make_batches_shuffled_covers_everything_once():
    ds = _tiny_sparse()
    ds.samples = ds.samples * 5  # 10 samples
    seen = []
    for batch in make_batches(ds, 4, rng=SeededRng(0, 1000), shuffle=True):
        seen.extend(batch.labels.tolist())
    assert len(seen) == 10
    assert sorted(seen) == sorted(s.label for s in ds.samples)


def test_signatures_are_separated():
    spec = PlantedDelaySpec()
    ids, sigs = plant_signatures(spec, SeededRng(5, 1))
    assert len(ids) == spec.pattern_channels
    assert len(set(ids)) == spec.pattern_channels
    min_sep = 2 * spec.jitter + 1
    for a in range(len(sigs)):
        for b in range(a + 1, len(sigs)):
            dist = np.max(np.abs(np.asarray(sigs[a]) - np.asarray(sigs[b])))
            assert dist >= min_sep
        assert all(0 <= o <= spec.max_offset for o in sigs[a])


def test_planted_dataset_shape_and_balance():
    spec = PlantedDelaySpec(samples_per_class=12)
    ds = generate_planted_delay(spec, SeededRng(3, 0))
    assert len(ds.samples) == 12 * spec.n_classes
    assert ds.num_channels == spec.channels
    assert ds.num_classes == spec.n_classes
    labels = [s.label for s in ds.samples]
    for k in range(spec.n_classes):
        assert labels.count(k) == 12
    for s in ds.samples:
        assert s.duration == spec.duration


def test_planted_pattern_spikes_present():
    """Every sample must contain its class signature at some onset, up to jitter."""
    spec = PlantedDelaySpec(samples_per_class=4, background_rate=0.0, jitter=0)
    rng = SeededRng(9, 0)
    ids, sigs = plant_signatures(spec, rng.derive(1))
    ds = generate_planted_delay(spec, SeededRng(9, 0))
    for s in ds.samples:
        d = densify(s, spec.channels)
        sig = np.asarray(sigs[s.label])
        hits = []
        for t0 in range(spec.duration - spec.max_offset):
            if all(d[ids[i], t0 + sig[i]] > 0 for i in range(len(ids))):
                hits.append(t0)
        assert hits, f"signature for class {s.label} not found"


def test_split_is_stratified_and_disjoint():
    spec = PlantedDelaySpec(samples_per_class=20)
    ds = generate_planted_delay(spec, SeededRng(1, 0))
    a, b, c = split(ds, [0.6, 0.2, 0.2], SeededRng(1, 9))
    assert len(a.samples) + len(b.samples) + len(c.samples) == len(ds.samples)
    for part, frac in ((a, 0.6), (b, 0.2), (c, 0.2)):
        labels = [s.label for s in part.samples]
        for k in range(spec.n_classes):
            assert abs(labels.count(k) - frac * 20) <= 1


def test_validate_catches_out_of_range_events():
    ds = _tiny_sparse()
    bad = np.array([(50, 0, 1)], dtype=ds.samples[0].events.dtype)
    ds.samples[0] = SpikeSample(duration=9, label=1, events=bad)
    with pytest.raises(DataFormatError):
        ds.validate()
