"""End to end checks: CLI convert then verify, and the outputs load back
through the training library with the exact counts the manifest promises."""

import json
import wave

import h5py
import numpy as np
import pytest
from spikedelay.datasets import load_spkds

from spkconv import cli
from spkconv.manifest import manifest_path, read_manifest


def make_archive(path, n=12, n_classes=20, seed=3):
    rng = np.random.default_rng(seed)
    times, units, labels = [], [], []
    for i in range(n):
        k = int(rng.integers(5, 40))
        t = np.sort(rng.uniform(0.0, 0.9, k))
        u = rng.integers(0, 700, k)
        times.append(t)
        units.append(u)
        labels.append(i % n_classes)
    with h5py.File(path, "w") as fh:
        g = fh.create_group("spikes")
        dt = h5py.vlen_dtype(np.float64)
        du = h5py.vlen_dtype(np.int64)
        g.create_dataset("times", (n,), dtype=dt, data=times)
        g.create_dataset("units", (n,), dtype=du, data=units)
        fh.create_dataset("labels", data=np.asarray(labels, dtype=np.int64))
    return labels


def make_corpus(path, words=("go", "no", "up"), per_word=2):
    t = np.arange(16000) / 16000.0
    for wi, word in enumerate(words):
        (path / word).mkdir(parents=True)
        for i in range(per_word):
            x = 0.4 * np.sin(2 * np.pi * (400 + 300 * wi + 20 * i) * t)
            data = (x * 32767).astype("<i2")
            with wave.open(str(path / word / f"{i}.wav"), "wb") as fh:
                fh.setnchannels(1)
                fh.setsampwidth(2)
                fh.setframerate(16000)
                fh.writeframes(data.tobytes())


def test_spiking_convert_verify_roundtrip(tmp_path, capsys):
    raw = tmp_path / "shd.h5"
    out = tmp_path / "shd.spkds"
    labels = make_archive(raw)

    assert cli.main(["convert", "shd", "--in", str(raw), "--out", str(out)]) == cli.EXIT_OK
    assert cli.main(["verify", str(out)]) == cli.EXIT_OK
    assert "pass" in capsys.readouterr().out

    ds = load_spkds(out)
    assert ds.num_channels == 140
    assert ds.num_classes == 20

    # every raw spike lands in exactly one (time, channel) count
    with h5py.File(raw) as fh:
        raw_counts = [len(t) for t in fh["spikes/times"]]
    got_counts = [int(s.events["count"].sum()) for s in ds.samples]
    assert got_counts == raw_counts

    man = read_manifest(out)
    assert man["num_samples"] == len(ds.samples)
    assert man["num_channels"] == 140
    assert man["params"]["total_events"] == sum(raw_counts)

    per_class = [0] * 20
    for lab in labels:
        per_class[lab] += 1
    assert man["per_class_counts"] == per_class

    hist = [0] * 20
    for s in ds.samples:
        hist[s.label] += 1
    assert hist == man["per_class_counts"]


def test_audio_convert_verify_roundtrip(tmp_path):
    corpus = tmp_path / "speech"
    out = tmp_path / "gsc.spkds"
    make_corpus(corpus)

    assert cli.main(["convert", "gsc", "--in", str(corpus), "--out", str(out)]) == cli.EXIT_OK
    assert cli.main(["verify", str(out)]) == cli.EXIT_OK

    ds = load_spkds(out)
    assert ds.num_channels == 140
    for s in ds.samples:
        c, t = s.dense.shape
        assert c == 140
        assert 98 <= t <= 101

    man = read_manifest(out)
    assert man["class_names"] == ["go", "no", "up"]
    assert man["per_class_counts"] == [2, 2, 2]
    assert man["delta_t_us"] == 10000

    hist = [0] * 3
    for s in ds.samples:
        hist[s.label] += 1
    assert hist == man["per_class_counts"]


def test_convert_is_deterministic(tmp_path):
    corpus = tmp_path / "speech"
    make_corpus(corpus)
    a = tmp_path / "a.spkds"
    b = tmp_path / "b.spkds"
    cli.main(["convert", "gsc", "--in", str(corpus), "--out", str(a)])
    cli.main(["convert", "gsc", "--in", str(corpus), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_verify_catches_truncation(tmp_path, capsys):
    raw = tmp_path / "shd.h5"
    out = tmp_path / "shd.spkds"
    make_archive(raw)
    cli.main(["convert", "shd", "--in", str(raw), "--out", str(out)])

    blob = out.read_bytes()
    out.write_bytes(blob[: len(blob) - 7])
    assert cli.main(["verify", str(out)]) == cli.EXIT_DATA
    assert "pass" not in capsys.readouterr().out.splitlines()[-1]


def test_verify_catches_manifest_drift(tmp_path):
    raw = tmp_path / "shd.h5"
    out = tmp_path / "shd.spkds"
    make_archive(raw)
    cli.main(["convert", "shd", "--in", str(raw), "--out", str(out)])

    mp = manifest_path(out)
    man = json.loads(mp.read_text())
    man["per_class_counts"][0] += 1
    mp.write_text(json.dumps(man))
    assert cli.main(["verify", str(out)]) == cli.EXIT_DATA


def test_missing_input_is_config_error(tmp_path):
    rc = cli.main(
        ["convert", "shd", "--in", str(tmp_path / "nope.h5"), "--out", str(tmp_path / "x.spkds")]
    )
    assert rc == cli.EXIT_CONFIG
