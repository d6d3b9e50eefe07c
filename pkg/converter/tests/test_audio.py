import wave

import numpy as np
import pytest
from spikedelay.datasets import ENC_DENSE

from spkconv.audio import (
    SAMPLE_RATE,
    AudioError,
    AudioJob,
    convert_audio,
    log_mel,
    mel_filterbank,
    read_wav,
    scan_classes,
)


def write_wav(path, samples, rate=SAMPLE_RATE):
    data = np.clip(np.asarray(samples) * 32767.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(data.tobytes())


def sine(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SAMPLE_RATE * seconds)) / SAMPLE_RATE
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture()
def corpus(tmp_path):
    root = tmp_path / "gsc"
    rng = np.random.default_rng(5)
    for word, make in (
        ("left", lambda i: sine(300 + 40 * i)),
        ("right", lambda i: sine(1200 + 60 * i)),
        ("stop", lambda i: rng.uniform(-0.3, 0.3, SAMPLE_RATE)),
    ):
        (root / word).mkdir(parents=True)
        for i in range(3):
            write_wav(root / word / f"{i}.wav", make(i))
    return root


def test_wav_round_trip(tmp_path):
    write_wav(tmp_path / "x.wav", sine(440, 0.25))
    w = read_wav(tmp_path / "x.wav")
    assert len(w) == SAMPLE_RATE // 4
    assert abs(float(w.max()) - 0.5) < 1e-3


def test_wrong_rate_rejected(tmp_path):
    write_wav(tmp_path / "x.wav", sine(440, 0.1), rate=8000)
    with pytest.raises(AudioError, match="8000"):
        read_wav(tmp_path / "x.wav")


def test_filterbank_shape_and_coverage():
    job = AudioJob("-", "-")
    bank = mel_filterbank(job)
    assert bank.shape == (140, 257)
    assert (bank >= 0).all()
    # interior filters tile the band: every fft bin between the first and
    # last edge gets nonzero weight from at least one filter
    covered = bank.sum(axis=0)
    hz = np.fft.rfftfreq(512, 1.0 / SAMPLE_RATE)
    inside = (hz > 100.0) & (hz < 7800.0)
    assert (covered[inside] > 0).all()


def test_frame_count_98():
    job = AudioJob("-", "-")
    assert job.frames_per_second == 98
    feats = log_mel(sine(500), job)
    assert feats.shape == (140, 98)
    assert 98 <= feats.shape[1] <= 101


def test_sine_concentrates_energy():
    job = AudioJob("-", "-")
    f300 = log_mel(sine(300), job)
    f3k = log_mel(sine(3000), job)
    assert f300[:, 10].argmax() < f3k[:, 10].argmax()


def test_silence_is_floor():
    job = AudioJob("-", "-")
    feats = log_mel(np.zeros(SAMPLE_RATE), job)
    assert np.allclose(feats, np.log(1e-6), atol=1e-3)


def test_short_clip_padded():
    job = AudioJob("-", "-")
    feats = log_mel(sine(500, 0.3), job)
    assert feats.shape == (140, 98)
    # padded tail decays to the log floor
    assert feats[:, -5:].max() < feats[:, :20].max() - 5.0


def test_convert_corpus(corpus, tmp_path):
    job = AudioJob(str(corpus), str(tmp_path / "g.spkds"))
    ds = convert_audio(job)
    assert ds.encoding == ENC_DENSE
    assert ds.num_channels == 140
    assert ds.num_classes == 3
    assert len(ds.samples) == 9
    assert scan_classes(corpus) == ["left", "right", "stop"]
    for s in ds.samples:
        assert s.dense.shape == (140, 98)
    labels = [s.label for s in ds.samples]
    assert labels == sorted(labels)


def test_empty_dir_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(AudioError, match="no word"):
        scan_classes(tmp_path / "empty")
