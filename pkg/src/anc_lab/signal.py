"""DSP primitives: STFT/ISTFT, causal FIR filtering, Welch PSD and WAV I/O.

Everything here is a pure function of its inputs and runs in double
precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import (
    EmptyFilter,
    EmptyInput,
    InvalidHop,
    NonInvertibleConfig,
    SampleRateMismatch,
    ShapeError,
    TooShort,
)

SAMPLE_RATE = 16000


@dataclass
class MultichannelSignal:
    """Real audio stored as a (channels, length) matrix."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ShapeError(f"expected (channels, length), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = samples

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    """One-sided complex STFT, ``bins`` shaped (F, T) with F = nfft/2 + 1."""

    bins: np.ndarray
    nfft: int
    hop: int
    window: str = "hann"
    centered: bool = True
    length: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


def get_window(name: str, nfft: int) -> np.ndarray:
    if name in ("rect", "rectangular", "boxcar", "ones"):
        return np.ones(nfft)
    return scipy.signal.get_window(name, nfft, fftbins=True).astype(np.float64)


def n_frames(length: int, nfft: int, hop: int, centered: bool = True) -> int:
    """Number of STFT frames for a signal of ``length`` samples.

    Centered analysis places frame ``t`` around sample ``t * hop`` for every
    such sample inside the signal, so ``T = ceil(length / hop)``.  Uncentered
    analysis only keeps frames lying fully inside the (zero-extended to at
    least ``nfft``) signal.
    """
    if centered:
        return -(-length // hop)
    return 1 + max(length - nfft, 0) // hop


def _check_stft_args(nfft: int, hop: int):
    if nfft < 2 or nfft & (nfft - 1):
        raise ValueError(f"nfft must be a power of two, got {nfft}")
    if hop < 1:
        raise InvalidHop(f"hop must be >= 1, got {hop}")
    if hop > nfft:
        raise InvalidHop(f"hop {hop} exceeds nfft {nfft}")


def _frame(x: np.ndarray, nfft: int, hop: int, centered: bool) -> np.ndarray:
    length = x.shape[-1]
    t = n_frames(length, nfft, hop, centered)
    if centered:
        pad = nfft // 2
        mode = "reflect" if length > pad else "constant"
        right = max(pad, (t - 1) * hop + nfft - pad - length)
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, right)]
        xp = np.pad(x, widths, mode=mode)
    else:
        need = (t - 1) * hop + nfft
        widths = [(0, 0)] * (x.ndim - 1) + [(0, max(need - length, 0))]
        xp = np.pad(x, widths)
    frames = np.lib.stride_tricks.sliding_window_view(xp, nfft, axis=-1)
    return frames[..., : (t - 1) * hop + 1 : hop, :]


def stft(
    signal,
    nfft: int = 1024,
    hop: int = 125,
    window: str = "hann",
    centered: bool = True,
) -> Spectrogram:
    """Short-time Fourier transform of a single-channel signal.

    With the defaults an 8000-sample frame gives a (513, 64) spectrogram.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("stft expects a single channel; use stft_multi for stacks")
    if x.size == 0:
        raise EmptyInput("cannot transform an empty signal")
    _check_stft_args(nfft, hop)
    frames = _frame(x, nfft, hop, centered) * get_window(window, nfft)
    bins = np.fft.rfft(frames, axis=-1).T
    return Spectrogram(bins, nfft, hop, window, centered, x.size)


def stft_multi(
    signals: np.ndarray, nfft: int = 1024, hop: int = 125, window: str = "hann", centered: bool = True
) -> np.ndarray:
    """Batched STFT over leading axes; returns complex (..., F, T)."""
    x = np.asarray(signals, dtype=np.float64)
    if x.shape[-1] == 0:
        raise EmptyInput("cannot transform an empty signal")
    _check_stft_args(nfft, hop)
    frames = _frame(x, nfft, hop, centered) * get_window(window, nfft)
    return np.swapaxes(np.fft.rfft(frames, axis=-1), -1, -2)


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are windowed again and normalised by the summed squared window, so
    any window/hop pair with a nonzero overlap-add envelope is invertible.
    """
    nfft, hop = spec.nfft, spec.hop
    _check_stft_args(nfft, hop)
    win = get_window(spec.window, nfft)
    if not scipy.signal.check_NOLA(win, nfft, nfft - hop):
        raise NonInvertibleConfig(f"window {spec.window!r} with hop {hop} fails overlap-add")
    bins = np.asarray(spec.bins)
    f, t = bins.shape
    if f != nfft // 2 + 1:
        raise ShapeError(f"expected {nfft // 2 + 1} bins, got {f}")
    frames = np.fft.irfft(bins.T, n=nfft, axis=-1) * win
    total = (t - 1) * hop + nfft
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win**2
    for i in range(t):
        out[i * hop : i * hop + nfft] += frames[i]
        norm[i * hop : i * hop + nfft] += wsq
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    offset = nfft // 2 if spec.centered else 0
    if length is None:
        length = spec.length if spec.length is not None else total - 2 * offset
    out = out[offset : offset + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def fir_filter(signal, taps) -> np.ndarray:
    """Causal linear convolution truncated to the input length.

    Works on a single channel or along the last axis of a stack.
    """
    h = np.asarray(taps, dtype=np.float64)
    if h.size == 0:
        raise EmptyFilter("filter has no taps")
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    if x.ndim == 1:
        return scipy.signal.convolve(x, h)[:n]
    flat = x.reshape(-1, n)
    out = np.stack([scipy.signal.convolve(row, h)[:n] for row in flat])
    return out.reshape(x.shape)


def welch_psd(
    signal, nfft: int = 1024, overlap: float = 0.5, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """One-sided Welch PSD (power per Hz), Hann segments, length nfft/2+1."""
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] < nfft:
        raise TooShort(f"signal of {x.shape[-1]} samples is shorter than nfft={nfft}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    _, psd = scipy.signal.welch(
        x,
        fs=sample_rate,
        window="hann",
        nperseg=nfft,
        noverlap=int(round(overlap * nfft)),
        detrend=False,
        scaling="density",
    )
    return psd


def psd_freqs(nfft: int = 1024, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.fft.rfftfreq(nfft, 1.0 / sample_rate)


def lowpass_noise(
    n: int, cutoff_hz: float = 2000.0, rng=None, order: int = 8, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """Unit-variance white Gaussian noise passed through a Butterworth low-pass."""
    rng = np.random.default_rng(rng)
    white = rng.standard_normal(n + 2048)
    sos = scipy.signal.butter(order, cutoff_hz, fs=sample_rate, output="sos")
    out = scipy.signal.sosfilt(sos, white)[2048:]
    std = out.std()
    return out / std if std > 0 else out


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> MultichannelSignal:
    """Load 16-bit PCM or 32-bit float WAV; the rate must match exactly."""
    rate, data = scipy.io.wavfile.read(Path(path))
    if rate != sample_rate:
        raise SampleRateMismatch(f"{path}: {rate} Hz, expected {sample_rate} Hz (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 1:
        samples = samples[None, :]
    else:
        samples = samples.T
    return MultichannelSignal(samples, rate)


def write_wav(path, signal: MultichannelSignal, pcm16: bool = False):
    data = signal.samples.T
    if data.shape[1] == 1:
        data = data[:, 0]
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    scipy.io.wavfile.write(Path(path), signal.sample_rate, data)
