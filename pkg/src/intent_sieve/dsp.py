"""
Acoustic feature extraction.

A waveform is turned into a fixed-size matrix of mel magnitudes plus an RMS energy column,
keeping the utterance tail (sentence-final frames carry the intonation cues):

    samples -> centered Hann STFT -> |X| -> mel filterbank -> (frames, n_mels)
            -> RMS energy column  -> (frames, n_mels + 1)
            -> tail window / left zero-padding -> (tail_frames, n_mels + 1)
"""

import asyncio
import logging
import struct
from concurrent.futures import Executor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import AsyncIterator, BinaryIO, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import InvalidConfig, InvalidInput

logger = logging.getLogger(__name__)

FEATURE_MAGIC = "ISF1"
LOG_EPS = 1e-6
_PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono signal with amplitudes in [-1, 1) for PCM input."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).ravel())
        if self.sample_rate_hz <= 0:
            raise InvalidInput(f"Sample rate must be positive: {self.sample_rate_hz}")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128
    tail_frames: int = 300
    apply_log: bool = False
    sample_rate_hz: int = 16000

    def __post_init__(self):
        for name in ("n_fft", "hop", "n_mels", "tail_frames", "sample_rate_hz"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive: {getattr(self, name)}")
        if self.hop > self.n_fft:
            raise InvalidConfig(f"hop ({self.hop}) must not exceed n_fft ({self.n_fft})")
        if self.n_mels > self.n_bins:
            raise InvalidConfig(
                f"n_mels ({self.n_mels}) must not exceed n_fft/2 + 1 ({self.n_bins})"
            )

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def feature_shape(self):
        return (self.tail_frames, self.n_mels + 1)


@dataclass(frozen=True)
class AcousticFeature:
    matrix: np.ndarray
    valid_frames: int

    @property
    def shape(self):
        return self.matrix.shape


def _check_waveform(w: Waveform):
    if len(w) == 0:
        raise InvalidInput("Waveform is empty")
    if not np.all(np.isfinite(w.samples)):
        raise InvalidInput("Waveform contains non-finite samples")


def _frames(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Centered frames of length n_fft, one every hop samples: 1 + len // hop frames."""
    _check_waveform(w)
    # odd windows take the extra sample on the right
    pad = (cfg.n_fft // 2, cfg.n_fft - cfg.n_fft // 2)
    # a single sample has nothing to reflect
    padded = np.pad(w.samples, pad, mode="reflect" if len(w) > 1 else "edge")
    n_frames = 1 + len(w) // cfg.hop
    return sliding_window_view(padded, cfg.n_fft)[:: cfg.hop][:n_frames]


@lru_cache(maxsize=8)
def _hann(n_fft: int) -> np.ndarray:
    window = get_window("hann", n_fft, fftbins=True)
    window.setflags(write=False)
    return window


def stft_magnitude(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Magnitude spectrogram of shape (frames, n_fft / 2 + 1)."""
    frames = _frames(w, cfg)
    return np.abs(np.fft.rfft(frames * _hann(cfg.n_fft), axis=1))


def energy_contour(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Root-mean-square amplitude of each (unwindowed) STFT frame."""
    frames = _frames(w, cfg)
    return np.sqrt(np.mean(np.square(frames), axis=1))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """
    Triangular filters equally spaced on the HTK mel scale from 0 Hz to Nyquist.

    Returns:
        Weights of shape (n_mels, n_fft / 2 + 1)
    """
    if cfg.n_mels > cfg.n_bins:
        raise InvalidConfig(f"n_mels ({cfg.n_mels}) must not exceed n_fft/2 + 1 ({cfg.n_bins})")
    return _mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate_hz).copy()


@lru_cache(maxsize=8)
def _mel_filterbank(n_fft: int, n_mels: int, sample_rate_hz: int) -> np.ndarray:
    nyquist = sample_rate_hz / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft

    left, center, right = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - left) / (center - left)
    falling = (right - bin_hz) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    # filters narrower than the bin spacing catch no bin center
    empty = np.flatnonzero(~np.any(weights > 0, axis=1))
    if empty.size:
        logger.warning(
            "%d mel filters fall between FFT bins, using their nearest bin instead", empty.size
        )
        nearest = np.rint(edges_hz[1:-1][empty] * n_fft / sample_rate_hz).astype(int)
        weights[empty, nearest] = 1.0
    weights.setflags(write=False)
    return weights


def _tail_window(rows: np.ndarray, length: int) -> np.ndarray:
    """Keep the last `length` rows, left-padding with zero rows if there are fewer."""
    out = np.zeros((length, rows.shape[1]), dtype=np.float64)
    tail = rows[-length:]
    out[length - len(tail) :] = tail
    return out


def extract_feature(w: Waveform, cfg: FeatureConfig) -> AcousticFeature:
    """Mel spectrogram with appended energy column, tail-windowed to `cfg.tail_frames` rows."""
    magnitude = stft_magnitude(w, cfg)
    mel = magnitude @ _mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate_hz).T
    if cfg.apply_log:
        mel = np.log(mel + LOG_EPS)
    energy = energy_contour(w, cfg)
    full = np.column_stack((mel, energy))
    valid = min(len(full), cfg.tail_frames)
    return AcousticFeature(matrix=_tail_window(full, cfg.tail_frames), valid_frames=valid)


def read_wav(path: Union[str, Path]) -> Waveform:
    """
    Read a 16-bit PCM mono WAV file.

    Raises:
        InvalidInput: If the file isn't a readable 16-bit PCM mono WAV file
    """
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError, struct.error) as e:
        raise InvalidInput(f"Unreadable WAV file {path!s}: {e}") from None
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise InvalidInput(f"Expected mono audio, got {data.shape[1]} channels: {path!s}")
        data = data[:, 0]
    if data.dtype != np.int16:
        raise InvalidInput(f"Expected 16-bit PCM, got {data.dtype}: {path!s}")
    return Waveform(samples=data.astype(np.float64) / _PCM16_SCALE, sample_rate_hz=int(rate))


def write_wav(path: Union[str, Path], w: Waveform):
    """Write a waveform as 16-bit PCM mono WAV (samples clipped to [-1, 1))."""
    pcm = np.clip(np.rint(w.samples * _PCM16_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate_hz, pcm)


def write_feature(file: Union[str, Path, BinaryIO], matrix: np.ndarray):
    """Dump a feature matrix as `ISF1 <rows> <cols>` header line + little-endian float32 rows."""
    rows, cols = matrix.shape
    payload = f"{FEATURE_MAGIC} {rows} {cols}\n".encode("ascii")
    payload += np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    if isinstance(file, (str, Path)):
        Path(file).write_bytes(payload)
    else:
        file.write(payload)


def read_feature(file: Union[str, Path, BinaryIO]) -> AcousticFeature:
    """Load an ISF1 dump; valid frames are the rows after the leading all-zero block."""
    data = Path(file).read_bytes() if isinstance(file, (str, Path)) else file.read()
    header, sep, body = data.partition(b"\n")
    parts = header.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 3 or parts[0] != FEATURE_MAGIC:  # noqa: PLR2004
        raise InvalidInput(f"Not an {FEATURE_MAGIC} feature dump")
    try:
        rows, cols = int(parts[1]), int(parts[2])
    except ValueError:
        raise InvalidInput(f"Invalid {FEATURE_MAGIC} header: {header!r}") from None
    if rows < 0 or cols < 0:
        raise InvalidInput(f"Invalid {FEATURE_MAGIC} header: {header!r}")
    expected = rows * cols * struct.calcsize("<f")
    if len(body) != expected:
        raise InvalidInput(f"Feature dump has {len(body)} payload bytes, expected {expected}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    nonzero = np.flatnonzero(np.any(matrix != 0, axis=1))
    valid = rows - int(nonzero[0]) if nonzero.size else 0
    return AcousticFeature(matrix=matrix, valid_frames=valid)


def featurize_file(path: Union[str, Path], cfg: FeatureConfig) -> AcousticFeature:
    return extract_feature(read_wav(path), cfg)


async def featurize_parallel(
    paths: Sequence[Path],
    cfg: FeatureConfig,
    *,
    executor: Optional[Executor] = None,
) -> AsyncIterator[Tuple[int, Union[AcousticFeature, InvalidInput]]]:
    """Yield `(index, feature or error)` in completion order, extracting on a thread pool."""
    loop = asyncio.get_running_loop()

    async def run(i: int, path: Path):
        try:
            feature = await loop.run_in_executor(executor, featurize_file, path, cfg)
        except InvalidInput as e:
            return i, e
        return i, feature

    for coro in asyncio.as_completed([run(i, path) for i, path in enumerate(paths)]):
        yield await coro
