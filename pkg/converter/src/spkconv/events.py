"""Spiking event archives (HDF5) -> spatially and temporally binned SPKDS.

The source layout is the public spiking-audio convention: vlen datasets
`spikes/times` (seconds, float) and `spikes/units` (0..699), plus `labels`.
Every raw event lands in exactly one (time bin, channel) cell, so total
event counts are conserved through both binnings.
"""

from __future__ import annotations

from dataclasses import dataclass

import h5py
import numpy as np
from spikedelay.datasets import (
    ENC_SPARSE,
    SpikeDataset,
    SpikeSample,
    events_from_counts,
)

RAW_UNITS = 700
KIND_CLASSES = {"shd": 20, "ssc": 35}


class SourceError(ValueError):
    """Raised for unreadable or out-of-contract source archives."""


@dataclass
class SpikingJob:
    kind: str                 # "shd" | "ssc"
    input_path: str
    output_path: str
    bin_factor: int = 5
    dt_ms: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in KIND_CLASSES:
            raise SourceError(f"unknown spiking source kind {self.kind!r}")
        if self.bin_factor < 1 or RAW_UNITS % self.bin_factor != 0:
            raise SourceError(f"bin factor must divide {RAW_UNITS}, got {self.bin_factor}")
        if self.dt_ms <= 0:
            raise SourceError(f"dt_ms must be positive, got {self.dt_ms}")

    @property
    def num_channels(self) -> int:
        return RAW_UNITS // self.bin_factor

    @property
    def delta_t_us(self) -> int:
        return int(round(self.dt_ms * 1000.0))


def _read_archive(path: str):
    try:
        fh = h5py.File(path, "r")
    except (OSError, FileNotFoundError) as exc:
        raise SourceError(f"cannot open archive {path}: {exc}") from exc
    try:
        times = fh["spikes"]["times"]
        units = fh["spikes"]["units"]
        labels = fh["labels"]
        if not (len(times) == len(units) == len(labels)):
            raise SourceError(
                f"archive {path}: times/units/labels lengths differ "
                f"({len(times)}/{len(units)}/{len(labels)})")
        yield_items = [
            (np.asarray(times[i], np.float64),
             np.asarray(units[i], np.int64),
             int(labels[i]))
            for i in range(len(labels))
        ]
    except KeyError as exc:
        fh.close()
        raise SourceError(f"archive {path}: missing dataset {exc}") from exc
    except SourceError:
        fh.close()
        raise
    fh.close()
    return yield_items


def convert_sample(times_s: np.ndarray, units: np.ndarray, label: int,
                   job: SpikingJob) -> SpikeSample:
    if len(times_s) != len(units):
        raise SourceError("event times and unit ids differ in length")
    if len(units) and (units.min() < 0 or units.max() >= RAW_UNITS):
        bad = int(units.min()) if units.min() < 0 else int(units.max())
        raise SourceError(f"unit id {bad} outside [0, {RAW_UNITS})")
    if len(times_s) and times_s.min() < 0:
        raise SourceError(f"negative event time {times_s.min()}")
    t_bins = np.floor(times_s * 1000.0 / job.dt_ms).astype(np.int64)
    channels = units // job.bin_factor
    duration = int(t_bins.max()) + 1 if len(t_bins) else 1
    counts = np.zeros((job.num_channels, duration), np.int64)
    np.add.at(counts, (channels, t_bins), 1)
    return SpikeSample(duration=duration, label=label,
                       events=events_from_counts(counts))


def convert_spiking(job: SpikingJob) -> SpikeDataset:
    """Whole-archive conversion, samples in archive order."""
    num_classes = KIND_CLASSES[job.kind]
    samples = []
    for times_s, units, label in _read_archive(job.input_path):
        if not 0 <= label < num_classes:
            raise SourceError(f"label {label} outside [0, {num_classes}) for {job.kind}")
        samples.append(convert_sample(times_s, units, label, job))
    ds = SpikeDataset(
        encoding=ENC_SPARSE,
        num_channels=job.num_channels,
        num_classes=num_classes,
        delta_t_us=job.delta_t_us,
        samples=samples,
    )
    ds.validate()
    return ds


def total_events(ds: SpikeDataset) -> int:
    """Summed event counts across the corpus (conservation checks)."""
    return int(sum(int(s.events["count"].sum()) for s in ds.samples))
