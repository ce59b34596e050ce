import io
from dataclasses import replace

import numpy as np
import pytest
from intent_sieve.dsp import (
    FeatureConfig,
    Waveform,
    energy_contour,
    extract_feature,
    featurize_parallel,
    mel_filterbank,
    read_feature,
    read_wav,
    stft_magnitude,
    write_feature,
    write_wav,
)
from intent_sieve.errors import InvalidConfig, InvalidInput
from scipy.io import wavfile

CFG = FeatureConfig()
SMALL = FeatureConfig(n_fft=256, hop=128, n_mels=15, tail_frames=30, sample_rate_hz=8000)


def noise(n: int, sample_rate_hz: int = 8000, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    return Waveform(samples=rng.uniform(-0.5, 0.5, size=n), sample_rate_hz=sample_rate_hz)


def test_stft_frame_count():
    spec = stft_magnitude(noise(4096, 16000), CFG)
    assert spec.shape == (9, 1025)


@pytest.mark.parametrize("n", [1, 100, 4096])
def test_stft_of_silence(n):
    spec = stft_magnitude(Waveform(np.zeros(n), 16000), CFG)
    assert spec.shape == (1 + n // CFG.hop, CFG.n_bins)
    assert np.all(spec == 0)


@pytest.mark.parametrize("n_fft", [255, 256, 257])
@pytest.mark.parametrize("n", [1, 127, 128, 255, 256, 1000])
def test_stft_frame_count_odd_and_even_windows(n_fft, n):
    cfg = FeatureConfig(n_fft=n_fft, hop=128, n_mels=15, sample_rate_hz=8000)
    w = noise(n)
    assert stft_magnitude(w, cfg).shape == (1 + n // 128, n_fft // 2 + 1)
    assert energy_contour(w, cfg).shape == (1 + n // 128,)


def naive_dft_magnitude(frame: np.ndarray) -> np.ndarray:
    n = len(frame)
    return np.array(
        [
            abs(sum(frame[t] * np.exp(-2j * np.pi * k * t / n) for t in range(n)))
            for k in range(n // 2 + 1)
        ]
    )


@pytest.mark.parametrize("seed", range(10))
def test_stft_matches_naive_dft(seed):
    cfg = FeatureConfig(n_fft=64, hop=32, n_mels=8, sample_rate_hz=8000)
    w = noise(200, seed=seed)
    padded = np.pad(w.samples, 32, mode="reflect")
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(64) / 64)
    spec = stft_magnitude(w, cfg)
    for i, row in enumerate(spec):
        frame = padded[i * 32 : i * 32 + 64] * window
        expected = naive_dft_magnitude(frame)
        assert np.allclose(row, expected, rtol=1e-6, atol=1e-9 * expected.max())


@pytest.mark.parametrize("a", [-3.0, -0.5, 0.1, 2.0])
def test_features_scale_with_amplitude(a):
    w = noise(3000)
    scaled = Waveform(a * w.samples, w.sample_rate_hz)
    assert np.allclose(stft_magnitude(scaled, SMALL), abs(a) * stft_magnitude(w, SMALL))
    assert np.allclose(energy_contour(scaled, SMALL), abs(a) * energy_contour(w, SMALL))
    feature = extract_feature(w, SMALL).matrix
    assert np.allclose(extract_feature(scaled, SMALL).matrix, abs(a) * feature)


def test_extract_feature_shapes():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cfg = FeatureConfig(
            n_fft=64,
            hop=int(rng.integers(8, 65)),
            n_mels=int(rng.integers(1, 21)),
            tail_frames=int(rng.integers(1, 60)),
            sample_rate_hz=8000,
        )
        n = int(rng.integers(1, 3000))
        feature = extract_feature(noise(n, seed=n), cfg)
        assert feature.shape == (cfg.tail_frames, cfg.n_mels + 1)
        assert feature.valid_frames == min(1 + n // cfg.hop, cfg.tail_frames)


def test_stft_peak_at_bin_center():
    k = 100
    freq = k * CFG.sample_rate_hz / CFG.n_fft
    t = np.arange(8192) / CFG.sample_rate_hz
    spec = stft_magnitude(Waveform(np.sin(2 * np.pi * freq * t), CFG.sample_rate_hz), CFG)
    interior = spec[2:-2]
    assert np.all(np.argmax(interior, axis=1) == k)


def test_stft_empty_waveform():
    with pytest.raises(InvalidInput, match="empty"):
        stft_magnitude(Waveform(np.zeros(0), 16000), CFG)


def test_mel_filterbank_shape():
    assert mel_filterbank(CFG).shape == (128, 1025)


def test_mel_filterbank_single_filter_covers_band():
    weights = mel_filterbank(FeatureConfig(n_fft=256, n_mels=1, hop=128))
    assert weights.shape == (1, 129)
    assert np.all(weights[0, 1:-1] > 0)


@pytest.mark.parametrize("cfg", [CFG, SMALL])
def test_mel_filterbank_covers_every_inner_bin(cfg):
    column_sums = mel_filterbank(cfg).sum(axis=0)
    assert np.all(column_sums[1:-1] > 0)


def test_mel_filterbank_too_many_filters():
    with pytest.raises(InvalidConfig, match="must not exceed"):
        FeatureConfig(n_fft=64, hop=32, n_mels=40)


@pytest.mark.parametrize(
    ("kwargs", "match"),
    [
        ({"hop": 0}, "hop must be positive"),
        ({"n_fft": 256, "hop": 512}, "must not exceed n_fft"),
        ({"tail_frames": -1}, "tail_frames must be positive"),
    ],
)
def test_feature_config_invalid(kwargs, match):
    with pytest.raises(InvalidConfig, match=match):
        FeatureConfig(**kwargs)


@pytest.mark.parametrize("amplitude", [0.0, 0.25, 0.9])
def test_energy_of_constant_signal(amplitude):
    energy = energy_contour(Waveform(np.full(2000, amplitude), 8000), SMALL)
    assert np.allclose(energy, amplitude)


def full_feature(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    mel = stft_magnitude(w, cfg) @ mel_filterbank(cfg).T
    return np.column_stack((mel, energy_contour(w, cfg)))


def test_extract_feature_keeps_tail():
    w = noise(128 * 44)  # 45 frames
    feature = extract_feature(w, SMALL)
    assert feature.shape == (30, 16)
    assert feature.valid_frames == 30
    assert np.allclose(feature.matrix, full_feature(w, SMALL)[-30:])


def test_extract_feature_pads_short_utterance():
    w = noise(128 * 11)  # 12 frames
    feature = extract_feature(w, SMALL)
    assert feature.shape == (30, 16)
    assert feature.valid_frames == 12
    assert np.all(feature.matrix[:18] == 0)
    assert np.allclose(feature.matrix[18:], full_feature(w, SMALL))


def test_extract_feature_is_deterministic():
    w = noise(3000)
    assert np.array_equal(extract_feature(w, SMALL).matrix, extract_feature(w, SMALL).matrix)


def test_extract_feature_log():
    w = noise(3000)
    cfg_log = replace(SMALL, apply_log=True)
    linear = extract_feature(w, SMALL).matrix
    logged = extract_feature(w, cfg_log).matrix
    assert linear.shape == logged.shape
    assert not np.allclose(linear, logged)


def test_wav_roundtrip(tmp_path):
    w = noise(1000)
    path = tmp_path / "noise.wav"
    write_wav(path, w)
    loaded = read_wav(path)
    assert loaded.sample_rate_hz == 8000
    assert np.allclose(loaded.samples, w.samples, atol=1 / 32768)


def test_read_wav_corrupt(tmp_path):
    path = tmp_path / "corrupt.wav"
    path.write_bytes(b"not a wav file")
    with pytest.raises(InvalidInput, match="Unreadable WAV file"):
        read_wav(path)


def test_read_wav_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 8000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(InvalidInput, match="Expected mono audio"):
        read_wav(path)


def test_read_wav_float(tmp_path):
    path = tmp_path / "float.wav"
    wavfile.write(path, 8000, np.zeros(100, dtype=np.float32))
    with pytest.raises(InvalidInput, match="Expected 16-bit PCM"):
        read_wav(path)


def test_feature_dump():
    feature = extract_feature(noise(128 * 11), SMALL)
    buffer = io.BytesIO()
    write_feature(buffer, feature.matrix)
    assert buffer.getvalue().startswith(b"ISF1 30 16\n")
    buffer.seek(0)
    loaded = read_feature(buffer)
    assert loaded.valid_frames == 12
    assert np.allclose(loaded.matrix, feature.matrix, rtol=1e-6)


@pytest.mark.parametrize(
    ("payload", "match"),
    [
        (b"XXXX 1 1\n\0\0\0\0", "Not an ISF1 feature dump"),
        (b"ISF1 2 2\n\0\0\0\0", "payload bytes"),
        (b"ISF1 two 2\n\0\0\0\0", "Invalid ISF1 header"),
        (b"ISF1 -1 2\n", "Invalid ISF1 header"),
    ],
)
def test_read_feature_invalid(payload, match):
    with pytest.raises(InvalidInput, match=match):
        read_feature(io.BytesIO(payload))


@pytest.mark.asyncio()
async def test_featurize_parallel(tmp_path):
    paths = []
    for i in range(3):
        path = tmp_path / f"utt{i}.wav"
        write_wav(path, noise(2000, seed=i))
        paths.append(path)
    corrupt = tmp_path / "corrupt.wav"
    corrupt.write_bytes(b"not a wav file")
    paths.insert(1, corrupt)

    outcomes = {i: outcome async for i, outcome in featurize_parallel(paths, SMALL)}

    assert sorted(outcomes) == [0, 1, 2, 3]
    assert isinstance(outcomes[1], InvalidInput)
    for i in (0, 2, 3):
        assert outcomes[i].shape == (30, 16)
