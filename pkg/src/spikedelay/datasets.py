"""Spike datasets: the SPKDS binary container, batching with ragged-length
handling, spatial/temporal binning, and a synthetic task whose classes are
separable only through relative spike timing.

SPKDS layout (all little-endian):
  magic "SPKDS1" | encoding u8 (0 sparse, 1 dense) | reserved u8 = 0
  num_samples u32 | num_channels u32 | num_classes u32 | delta_t_us u32
  per sample: duration u32, label u16, then
    sparse: num_events u32 + events packed (t u16, ch u16, count u8)
    dense:  duration * num_channels float32, time-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core_math import SeededRng

MAGIC = b"SPKDS1"
ENC_SPARSE = 0
ENC_DENSE = 1
EVENT_DTYPE = np.dtype([("t", "<u2"), ("ch", "<u2"), ("count", "u1")])


class DataFormatError(ValueError):
    """Raised for malformed SPKDS payloads or inconsistent samples."""


@dataclass
class SpikeSample:
    duration: int
    label: int
    events: np.ndarray | None = None     # EVENT_DTYPE records, sparse encoding
    dense: np.ndarray | None = None      # [C, T] float32, dense encoding


@dataclass
class SpikeDataset:
    encoding: int
    num_channels: int
    num_classes: int
    delta_t_us: int
    samples: list

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], np.int64)

    def validate(self) -> None:
        if self.encoding not in (ENC_SPARSE, ENC_DENSE):
            raise DataFormatError(f"unknown encoding {self.encoding}")
        if self.num_channels < 1 or self.num_classes < 1 or self.delta_t_us < 1:
            raise DataFormatError("header fields must be positive")
        for idx, s in enumerate(self.samples):
            if not 0 <= s.label < self.num_classes:
                raise DataFormatError(f"sample {idx}: label {s.label} outside [0, {self.num_classes})")
            if s.duration < 1:
                raise DataFormatError(f"sample {idx}: nonpositive duration")
            if self.encoding == ENC_SPARSE:
                ev = s.events
                if ev is None or ev.dtype != EVENT_DTYPE:
                    raise DataFormatError(f"sample {idx}: sparse sample without event records")
                if len(ev) and (ev["t"].max() >= s.duration or ev["ch"].max() >= self.num_channels):
                    raise DataFormatError(f"sample {idx}: event outside duration/channel bounds")
            else:
                if s.dense is None or s.dense.shape != (self.num_channels, s.duration):
                    raise DataFormatError(f"sample {idx}: dense payload shape mismatch")


def densify(sample: SpikeSample, num_channels: int, dtype=np.float32) -> np.ndarray:
    """[C, T] count grid; duplicate (t, ch) events accumulate."""
    if sample.dense is not None:
        return sample.dense.astype(dtype, copy=False)
    grid = np.zeros((num_channels, sample.duration), dtype)
    ev = sample.events
    if len(ev):
        np.add.at(grid, (ev["ch"].astype(np.int64), ev["t"].astype(np.int64)), ev["count"].astype(dtype))
    return grid


def events_from_counts(counts: np.ndarray) -> np.ndarray:
    """Event records from a [C, T] count grid, sorted by (t, ch); counts over
    255 split into multiple records."""
    ch, t = np.nonzero(counts)
    order = np.lexsort((ch, t))
    ch, t = ch[order], t[order]
    vals = counts[ch, t].astype(np.int64)
    records = []
    for c, tt, v in zip(ch, t, vals):
        while v > 0:
            take = min(v, 255)
            records.append((tt, c, take))
            v -= take
    out = np.zeros(len(records), EVENT_DTYPE)
    for i, (tt, c, v) in enumerate(records):
        out[i] = (tt, c, v)
    return out


def save_spkds(path, dataset: SpikeDataset) -> None:
    dataset.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBIIII", dataset.encoding, 0, len(dataset.samples),
                             dataset.num_channels, dataset.num_classes, dataset.delta_t_us))
        for s in dataset.samples:
            fh.write(struct.pack("<IH", s.duration, s.label))
            if dataset.encoding == ENC_SPARSE:
                fh.write(struct.pack("<I", len(s.events)))
                fh.write(s.events.tobytes())
            else:
                fh.write(np.ascontiguousarray(s.dense.T, "<f4").tobytes())


def load_spkds(path) -> SpikeDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"bad magic {data[:len(MAGIC)]!r}")
    off = len(MAGIC)
    encoding, reserved, n_samples, n_channels, n_classes, delta_t_us = struct.unpack_from("<BBIIII", data, off)
    off += struct.calcsize("<BBIIII")
    if reserved != 0:
        raise DataFormatError("reserved header byte must be zero")
    if encoding not in (ENC_SPARSE, ENC_DENSE):
        raise DataFormatError(f"unknown encoding {encoding}")
    samples = []
    for _ in range(n_samples):
        if off + 6 > len(data):
            raise DataFormatError("truncated sample header")
        duration, label = struct.unpack_from("<IH", data, off)
        off += 6
        if encoding == ENC_SPARSE:
            (n_events,) = struct.unpack_from("<I", data, off)
            off += 4
            nbytes = n_events * EVENT_DTYPE.itemsize
            if off + nbytes > len(data):
                raise DataFormatError("truncated event payload")
            events = np.frombuffer(data, EVENT_DTYPE, n_events, off).copy()
            off += nbytes
            samples.append(SpikeSample(duration, label, events=events))
        else:
            nbytes = duration * n_channels * 4
            if off + nbytes > len(data):
                raise DataFormatError("truncated dense payload")
            dense = np.frombuffer(data, "<f4", duration * n_channels, off).reshape(duration, n_channels)
            off += nbytes
            samples.append(SpikeSample(duration, label, dense=np.ascontiguousarray(dense.T)))
    if off != len(data):
        raise DataFormatError("trailing bytes after last sample")
    ds = SpikeDataset(encoding, n_channels, n_classes, delta_t_us, samples)
    ds.validate()
    return ds


def bin_spatial(dataset: SpikeDataset, factor: int) -> SpikeDataset:
    """Merge channel groups of `factor`; spike counts are conserved."""
    if factor < 1 or dataset.num_channels % factor:
        raise DataFormatError(f"channel count {dataset.num_channels} not divisible by {factor}")
    out = []
    for s in dataset.samples:
        if dataset.encoding == ENC_SPARSE:
            ev = s.events.copy()
            ev["ch"] = ev["ch"] // factor
            out.append(SpikeSample(s.duration, s.label, events=ev))
        else:
            dense = s.dense.reshape(dataset.num_channels // factor, factor, s.duration).sum(axis=1)
            out.append(SpikeSample(s.duration, s.label, dense=dense.astype(np.float32)))
    return SpikeDataset(dataset.encoding, dataset.num_channels // factor,
                        dataset.num_classes, dataset.delta_t_us, out)


def bin_temporal(dataset: SpikeDataset, factor: int) -> SpikeDataset:
    """Merge time groups of `factor` (last group may be partial); the step
    size scales by the factor and counts are conserved."""
    if factor < 1:
        raise DataFormatError("factor must be >= 1")
    out = []
    for s in dataset.samples:
        new_T = (s.duration + factor - 1) // factor
        if dataset.encoding == ENC_SPARSE:
            ev = s.events.copy()
            ev["t"] = ev["t"] // factor
            out.append(SpikeSample(new_T, s.label, events=ev))
        else:
            padded = np.zeros((dataset.num_channels, new_T * factor), np.float32)
            padded[:, : s.duration] = s.dense
            dense = padded.reshape(dataset.num_channels, new_T, factor).sum(axis=2)
            out.append(SpikeSample(new_T, s.label, dense=dense))
    return SpikeDataset(dataset.encoding, dataset.num_channels,
                        dataset.num_classes, dataset.delta_t_us * factor, out)


@dataclass
class SpikeBatch:
    data: np.ndarray           # [B, C, T_max] float32 counts
    valid_lengths: np.ndarray  # [B] int64
    labels: np.ndarray         # [B] int64


def collate(dataset: SpikeDataset, indices) -> SpikeBatch:
    """Right-pad samples with zeros to the longest duration in the batch."""
    subset = [dataset.samples[i] for i in indices]
    T_max = max(s.duration for s in subset)
    data = np.zeros((len(subset), dataset.num_channels, T_max), np.float32)
    for row, s in enumerate(subset):
        data[row, :, : s.duration] = densify(s, dataset.num_channels)
    return SpikeBatch(
        data=data,
        valid_lengths=np.array([s.duration for s in subset], np.int64),
        labels=np.array([s.label for s in subset], np.int64),
    )


def make_batches(dataset: SpikeDataset, batch_size: int, rng: SeededRng | None = None,
                 shuffle: bool = False):
    """Yield SpikeBatch covers of the dataset; order is rng-deterministic
    when shuffled and positional otherwise.  The tail batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset.samples)
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise ValueError("shuffled batching needs an rng")
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield collate(dataset, order[start : start + batch_size])


@dataclass
class PlantedDelaySpec:
    """Synthetic classification task where class identity lives purely in
    the relative delays between spikes on a fixed set of pattern channels.

    Every class fires one spike on the same pattern_channels; class k uses
    offset signature delta_k (values in [0, max_offset]).  The pattern onset
    is drawn uniformly per sample and each pattern spike is jittered by
    +-jitter steps, so absolute position and rate carry no class information;
    Poisson background noise covers all channels.
    """

    n_classes: int = 10
    channels: int = 20
    duration: int = 100
    pattern_channels: int = 5
    max_offset: int = 25
    background_rate: float = 0.02
    jitter: int = 1
    samples_per_class: int = 500
    delta_t_us: int = 1000

    def __post_init__(self) -> None:
        if self.pattern_channels > self.channels:
            raise ValueError("more pattern channels than channels")
        if self.max_offset + 2 * self.jitter >= self.duration:
            raise ValueError("duration too short for max_offset plus jitter")
        if not 0.0 <= self.background_rate < 1.0:
            raise ValueError("background_rate outside [0, 1)")


def plant_signatures(spec: PlantedDelaySpec, rng: SeededRng):
    """Pattern channel ids plus per-class offset vectors, pairwise separated
    by more than twice the jitter in max-norm so noiseless patterns stay
    identifiable."""
    ids = np.sort(rng.gen.choice(spec.channels, spec.pattern_channels, replace=False))
    min_gap = 2 * spec.jitter + 1
    signatures = []
    attempts = 0
    while len(signatures) < spec.n_classes:
        cand = rng.integers(0, spec.max_offset + 1, spec.pattern_channels)
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place class signatures; offsets range too small")
        if all(np.max(np.abs(cand - s)) >= min_gap for s in signatures):
            signatures.append(cand)
    return ids, np.stack(signatures)


def generate_planted_delay(spec: PlantedDelaySpec, rng: SeededRng) -> SpikeDataset:
    ids, signatures = plant_signatures(spec, rng.derive(1))
    noise_rng = rng.derive(2)
    place_rng = rng.derive(3)
    samples = []
    j = spec.jitter
    t0_hi = spec.duration - spec.max_offset - j    # exclusive
    for label in range(spec.n_classes):
        for _ in range(spec.samples_per_class):
            counts = noise_rng.poisson(spec.background_rate, (spec.channels, spec.duration))
            t0 = int(place_rng.integers(j, t0_hi))
            jit = place_rng.integers(-j, j + 1, spec.pattern_channels) if j else np.zeros(spec.pattern_channels, np.int64)
            times = t0 + signatures[label] + jit
            counts = counts.astype(np.int64)
            counts[ids, times] += 1
            samples.append(SpikeSample(spec.duration, label, events=events_from_counts(counts)))
    ds = SpikeDataset(ENC_SPARSE, spec.channels, spec.n_classes, spec.delta_t_us, samples)
    ds.validate()
    return ds


def split(dataset: SpikeDataset, fractions, rng: SeededRng):
    """Stratified split into len(fractions) datasets; per-class proportions
    hold to within one sample (largest-remainder rounding)."""
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    per_split = [[] for _ in fractions]
    labels = dataset.labels()
    for cls in range(dataset.num_classes):
        idxs = np.nonzero(labels == cls)[0]
        idxs = idxs[rng.permutation(len(idxs))]
        n = len(idxs)
        base = [int(np.floor(f * n)) for f in fractions]
        rema = [f * n - b for f, b in zip(fractions, base)]
        for _ in range(n - sum(base)):
            k = int(np.argmax(rema))
            base[k] += 1
            rema[k] = -1.0
        for k, f in enumerate(fractions):
            if f > 0 and base[k] == 0 and n > 0:
                raise ValueError(f"split fraction {f} leaves class {cls} empty")
        start = 0
        for k, cnt in enumerate(base):
            per_split[k].extend(idxs[start : start + cnt].tolist())
            start += cnt
    out = []
    for members in per_split:
        members.sort()
        out.append(SpikeDataset(dataset.encoding, dataset.num_channels, dataset.num_classes,
                                dataset.delta_t_us, [dataset.samples[i] for i in members]))
    return tuple(out)
