"""Shoebox image-source room impulse responses, cardioid capsules, and
block-wise rendering of sources moving on a circle around an array.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.signal

from .errors import (
    AbsorptionOverflow,
    CorruptFile,
    LengthMismatch,
    NotNormalized,
    OutOfRoom,
    ShapeError,
    ZeroSignal,
)
from .signal import SAMPLE_RATE, MultichannelSignal

PRIMARY_RIR_LENGTH = 1024
SECONDARY_RIR_LENGTH = 256
ARRAY_DIAMETER = 0.025
# Reflections are high-passed here to strip the DC build-up that all-positive
# image amplitudes produce once many images share a sample.
DC_CUTOFF_HZ = 20.0


@dataclass
class RoomSetup:
    dimensions: tuple[float, float, float]
    rt60: float
    speed_of_sound: float = 343.0
    max_reflection_order: int | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.dimensions = tuple(float(d) for d in self.dimensions)
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        if self.rt60 < 0:
            raise ValueError("rt60 must be >= 0")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2 * (lx * ly + lx * lz + ly * lz)

    def sabine_absorption(self) -> float:
        if self.rt60 == 0:
            return 1.0
        alpha = 24 * math.log(10) * self.volume / (self.speed_of_sound * self.surface * self.rt60)
        if alpha > 1.0:
            raise AbsorptionOverflow(
                f"rt60={self.rt60} s needs absorption {alpha:.3f} > 1 in a {self.dimensions} room"
            )
        return alpha

    def reflection_coefficient(self) -> float:
        """Uniform pressure reflection coefficient reproducing ``rt60``.

        Sabine bounds the admissible range; the coefficient itself is solved
        from the decay of the specular image lattice, whose late energy is
        slower than the diffuse-field estimate in non-cubic rooms.
        """
        if self.rt60 == 0:
            return 0.0
        self.sabine_absorption()
        scale = _lattice_decay_time(self.dimensions)
        return math.exp(-scale / (2 * self.speed_of_sound * self.rt60))

    def absorption(self) -> float:
        return 1.0 - self.reflection_coefficient() ** 2

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dimensions) - margin))


@dataclass
class CardioidMic:
    """Capsule at ``position``; ``orientation=None`` makes it omnidirectional."""

    position: np.ndarray
    orientation: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.orientation is not None:
            self.orientation = np.asarray(self.orientation, dtype=float)
            if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
                raise NotNormalized("mic orientation must be a unit vector")


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@functools.lru_cache(maxsize=64)
def _lattice_decay_time(dimensions: tuple[float, float, float], n_dirs: int = 4000) -> float:
    """Schroeder T20-based RT60 of the image lattice for unit decay constant.

    Along direction u an image at distance d has undergone sum_i |u_i| d / L_i
    reflections, so its energy carries beta**(2 d a(u)).  The backward
    integral of the direction-averaged envelope is mean(exp(-a t) / a); the
    RT60 scales as 1 / (-2 c ln beta), so one evaluation at unit rate fixes
    the constant.
    """
    a = np.abs(_fibonacci_sphere(n_dirs)) @ (1.0 / np.asarray(dimensions))
    tau = np.linspace(0.0, 12.0 / a.min(), 4000)
    edc = np.mean(np.exp(-np.outer(tau, a)) / a, axis=1)
    edc_db = 10 * np.log10(edc / edc[0])
    idx = (edc_db <= -5.0) & (edc_db >= -25.0)
    slope, _ = np.polyfit(tau[idx], edc_db[idx], 1)
    return -60.0 / slope


def tetrahedral_directions() -> np.ndarray:
    """Outward unit vectors of a regular tetrahedron, azimuths 45/135/225/315 deg."""
    v = np.array([[1, 1, 1], [-1, 1, -1], [-1, -1, 1], [1, -1, -1]], dtype=float)
    return v / np.sqrt(3.0)


@dataclass
class MicArray:
    center: np.ndarray
    capsules: list[CardioidMic] = field(default_factory=list)

    @classmethod
    def tetrahedral(cls, center, diameter: float = ARRAY_DIAMETER) -> "MicArray":
        center = np.asarray(center, dtype=float)
        dirs = tetrahedral_directions()
        caps = [CardioidMic(center + 0.5 * diameter * d, d) for d in dirs]
        return cls(center, caps)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def __len__(self):
        return len(self.capsules)

    def rotated(self, rotation: np.ndarray, about=None) -> "MicArray":
        about = self.center if about is None else np.asarray(about, dtype=float)
        caps = [
            CardioidMic(about + rotation @ (c.position - about),
                        None if c.orientation is None else rotation @ c.orientation)
            for c in self.capsules
        ]
        return MicArray(about + rotation @ (self.center - about), caps)


def cardioid_gain(orientation, incidence) -> float:
    """0.5 * (1 + cos angle) between capsule axis and direction to the source."""
    o = np.asarray(orientation, dtype=float)
    u = np.asarray(incidence, dtype=float)
    if abs(np.linalg.norm(o) - 1) > 1e-9 or abs(np.linalg.norm(u) - 1) > 1e-9:
        raise NotNormalized("cardioid_gain needs unit vectors")
    return float(np.clip(0.5 * (1.0 + o @ u), 0.0, 1.0))


def source_position(center, doa_deg: float, radius: float) -> np.ndarray:
    """Point on the horizontal circle of ``radius`` around ``center`` at azimuth ``doa_deg``."""
    a = math.radians(doa_deg)
    return np.asarray(center, dtype=float) + radius * np.array([math.cos(a), math.sin(a), 0.0])


@dataclass
class ImageSources:
    positions: np.ndarray  # (N, 3)
    amplitudes: np.ndarray  # wall attenuation product, (N,)
    orders: np.ndarray  # total reflection count, (N,)


def image_sources(room: RoomSetup, source, max_distance: float, max_order: int | None = None) -> ImageSources:
    """Enumerate images of ``source`` within ``max_distance`` of the source itself
    (a conservative bound; callers trim per receiver)."""
    src = np.asarray(source, dtype=float)
    dims = np.asarray(room.dimensions)
    beta = room.reflection_coefficient()
    nmax = np.ceil(max_distance / (2 * dims)).astype(int) + 1
    if max_order is not None:
        nmax = np.minimum(nmax, max_order // 2 + 1)
    axes_pos, axes_cnt = [], []
    for i in range(3):
        r = np.arange(-nmax[i], nmax[i] + 1)
        pos, cnt = [], []
        for q in (0, 1):
            pos.append((1 - 2 * q) * src[i] + 2 * r * dims[i])
            cnt.append(np.abs(r - q) + np.abs(r))
        axes_pos.append(np.concatenate(pos))
        axes_cnt.append(np.concatenate(cnt))
    gx, gy, gz = np.meshgrid(*axes_pos, indexing="ij")
    cx, cy, cz = np.meshgrid(*axes_cnt, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    orders = (cx + cy + cz).ravel()
    keep = np.ones(orders.size, dtype=bool)
    if max_order is not None:
        keep &= orders <= max_order
    if beta == 0.0:
        keep &= orders == 0
    positions, orders = positions[keep], orders[keep]
    amplitudes = beta ** orders.astype(float)
    return ImageSources(positions, amplitudes, orders)


def _check_inside(room: RoomSetup, point, what: str):
    if not room.contains(point):
        raise OutOfRoom(f"{what} at {np.asarray(point).tolist()} is outside room {room.dimensions}")


def simulate_rirs(room: RoomSetup, source, mics: Sequence[CardioidMic], length: int) -> np.ndarray:
    """Impulse responses from one source to several receivers, shape (M, length).

    Delays are rounded to the nearest sample; each image contributes
    ``gain * attenuation / (4 pi d)`` where ``gain`` is the receiver's
    cardioid response toward that image.
    """
    _check_inside(room, source, "source")
    for m in mics:
        _check_inside(room, m.position, "mic")
    fs, c = room.sample_rate, room.speed_of_sound
    max_dist = (length + 1) * c / fs
    mic_pos = np.array([m.position for m in mics])
    reach = max_dist + np.max(np.linalg.norm(mic_pos - np.asarray(source), axis=1))
    imgs = image_sources(room, source, reach, room.max_reflection_order)
    is_direct = imgs.orders == 0
    sos = scipy.signal.butter(2, DC_CUTOFF_HZ, "highpass", fs=fs, output="sos")
    out = np.zeros((len(mics), length))
    for k, mic in enumerate(mics):
        vec = imgs.positions - mic.position
        dist = np.linalg.norm(vec, axis=1)
        delay = np.floor(dist * fs / c + 0.5).astype(int)
        amp = imgs.amplitudes / (4 * np.pi * dist)
        if mic.orientation is not None:
            amp = amp * np.clip(0.5 * (1.0 + (vec @ mic.orientation) / dist), 0.0, 1.0)
        # the tail stops once the reverberant decay is 60 dB down
        horizon = min(length, int(delay[is_direct][0] + room.rt60 * fs) + 1)
        ok = delay < horizon
        direct = ok & is_direct
        refl = ok & ~is_direct
        out[k] = np.bincount(delay[direct], weights=amp[direct], minlength=length)[:length]
        if refl.any():
            tail = np.bincount(delay[refl], weights=amp[refl], minlength=length)[:length]
            out[k] += scipy.signal.sosfilt(sos, tail)
    return out


def simulate_rir(room: RoomSetup, source, mic: CardioidMic, length: int) -> np.ndarray:
    fs, c = room.sample_rate, room.speed_of_sound
    d = np.linalg.norm(np.asarray(source, dtype=float) - mic.position)
    if length <= math.floor(d * fs / c + 0.5):
        raise ValueError(f"length {length} shorter than the direct-path delay")
    return simulate_rirs(room, source, [mic], length)[0]


def schroeder_rt60(rir, sample_rate: int = SAMPLE_RATE, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """RT60 from a line fit to the backward-integrated energy decay curve."""
    h = np.asarray(rir, dtype=float)
    energy = np.cumsum(h[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise ZeroSignal("impulse response has no energy")
    edc = 10 * np.log10(np.maximum(energy / energy[0], 1e-300))
    hi, lo = fit_db
    idx = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if idx.size < 2:
        raise ValueError("decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc[idx], 1)
    return -60.0 / slope


@dataclass
class MotionTrajectory:
    """Azimuth path of a source circling the array.

    ``frame_doas[k]`` is the DoA at the centre of frame ``k``.  ``law`` maps a
    fractional, centre-aligned frame index to degrees; without one the path is
    linearly interpolated (on the unwrapped angle) between frame centres.
    """

    frame_doas: np.ndarray
    radius: float
    next_frame_doa: float
    frame_length: float = 0.5
    law: Callable[[float], float] | None = None

    def __post_init__(self):
        self.frame_doas = np.mod(np.asarray(self.frame_doas, dtype=float), 360.0)
        if self.radius <= 0:
            raise ValueError("trajectory radius must be positive")

    @property
    def n_frames(self) -> int:
        return self.frame_doas.size

    @property
    def duration(self) -> float:
        return self.n_frames * self.frame_length

    def doa_at(self, t):
        """DoA in degrees, [0, 360), at time ``t`` seconds (scalar or array)."""
        k = np.asarray(t, dtype=float) / self.frame_length - 0.5
        if self.law is not None:
            return np.mod(np.vectorize(self.law, otypes=[float])(k), 360.0)
        path = np.unwrap(np.radians(np.append(self.frame_doas, self.next_frame_doa)), period=2 * np.pi)
        idx = np.arange(path.size, dtype=float)
        kc = np.clip(k, 0, path.size - 1)
        return np.mod(np.degrees(np.interp(kc, idx, path)), 360.0)

    @classmethod
    def static(cls, doa_deg: float, n_frames: int, radius: float = 0.4, frame_length: float = 0.5):
        return cls(np.full(n_frames, float(doa_deg)), radius, float(doa_deg) % 360.0, frame_length,
                   law=lambda k: doa_deg)


def crossfade_weights(n: int, block: int) -> tuple[np.ndarray, np.ndarray]:
    """Snapshot times ``k * block`` and triangular weights (K, n) summing to one."""
    times = np.arange(0, n + block, block)
    if times[-1] - block >= n:
        times = times[:-1]
    idx = np.arange(n)
    w = np.maximum(0.0, 1.0 - np.abs(idx[None, :] - times[:, None]) / block)
    return times, w


def render_moving_source(
    noise,
    doa_fn: Callable[[np.ndarray], np.ndarray],
    room: RoomSetup,
    center,
    radius: float,
    mics: Sequence[CardioidMic],
    n_samples: int,
    block: int = 1000,
    rir_length: int = PRIMARY_RIR_LENGTH,
    crossfade: bool = True,
) -> np.ndarray:
    """Time-varying convolution of ``noise`` to every receiver in ``mics``.

    The path is sampled at multiples of ``block``; neighbouring snapshot
    renderings are linearly cross-faded (or held piecewise-constant with
    ``crossfade=False``).  Returns (len(mics), n_samples).
    """
    x = np.asarray(noise, dtype=float)
    if x.size < n_samples:
        raise LengthMismatch(f"noise has {x.size} samples, trajectory needs {n_samples}")
    fs = room.sample_rate
    times = np.arange(0, n_samples + block, block)
    doas = np.atleast_1d(doa_fn(times / fs))
    out = np.zeros((len(mics), n_samples))
    cache: dict[float, np.ndarray] = {}
    for t0, doa in zip(times, doas):
        if crossfade:
            lo, hi = max(t0 - block, 0), min(t0 + block, n_samples)
        else:
            lo, hi = t0, min(t0 + block, n_samples)
        if lo >= hi:
            continue
        key = round(float(doa), 9)
        if key not in cache:
            cache[key] = simulate_rirs(room, source_position(center, doa, radius), mics, rir_length)
        h = cache[key]
        start = max(lo - rir_length + 1, 0)
        seg = x[start:hi]
        y = scipy.signal.oaconvolve(h, seg[None, :], axes=1)[:, lo - start : hi - start]
        if crossfade:
            w = np.maximum(0.0, 1.0 - np.abs(np.arange(lo, hi) - t0) / block)
            y = y * w
        out[:, lo:hi] += y
    return out


def timevarying_convolve(
    noise,
    trajectory: MotionTrajectory,
    room: RoomSetup,
    array: MicArray,
    block: int = 1000,
    rir_length: int = PRIMARY_RIR_LENGTH,
) -> MultichannelSignal:
    fs = room.sample_rate
    n = int(round(trajectory.duration * fs))
    frame = int(round(trajectory.frame_length * fs))
    if frame % block:
        raise ValueError(f"block {block} must divide the frame length {frame}")
    samples = render_moving_source(
        noise, trajectory.doa_at, room, array.center, trajectory.radius, array.capsules, n, block, rir_length
    )
    return MultichannelSignal(samples, fs)


def mix_at_snr(clean: MultichannelSignal, snr_db: float, rng_seed=None) -> MultichannelSignal:
    """Add white Gaussian sensor noise to every channel.

    The noise on each channel is rescaled to exactly ``P / 10**(snr/10)``
    where ``P`` is the mean per-channel power of ``clean``.  ``snr_db=inf``
    returns the input unchanged.
    """
    x = clean.samples
    if math.isinf(snr_db) and snr_db > 0:
        return MultichannelSignal(x.copy(), clean.sample_rate)
    power = np.mean(x**2)
    if power == 0:
        raise ZeroSignal("cannot set an SNR against a silent signal")
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal(x.shape)
    noise -= noise.mean(axis=1, keepdims=True)
    noise *= np.sqrt(power / 10 ** (snr_db / 10) / np.mean(noise**2, axis=1, keepdims=True))
    return MultichannelSignal(x + noise, clean.sample_rate)


RIR_MAGIC = b"ANCR"
RIR_VERSION = 1


def save_rir_cache(path, rirs: np.ndarray):
    """Write a (V, J, length) RIR stack."""
    rirs = np.asarray(rirs, dtype="<f8")
    if rirs.ndim != 3:
        raise ShapeError("RIR cache expects a (V, J, length) array")
    v, j, n = rirs.shape
    with open(Path(path), "wb") as f:
        f.write(RIR_MAGIC + struct.pack("<IIII", RIR_VERSION, v, j, n))
        f.write(rirs.tobytes(order="C"))


def load_rir_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != RIR_MAGIC:
        raise CorruptFile(f"{path}: not an RIR cache")
    version, v, j, n = struct.unpack("<IIII", data[4:20])
    if version != RIR_VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    if len(data) != 20 + v * j * n * 8:
        raise CorruptFile(f"{path}: payload size does not match header {v}x{j}x{n}")
    return np.frombuffer(data[20:], dtype="<f8").reshape(v, j, n).copy()


@dataclass
class AncGeometry:
    """Single-channel feedforward plant: reference array, loudspeaker, error mic."""

    room: RoomSetup
    array_center: tuple[float, float, float] = (6.0, 4.0, 2.2)
    secondary_source: tuple[float, float, float] = (4.8, 4.0, 2.2)
    error_mic: tuple[float, float, float] = (4.6, 4.0, 2.2)
    radius: float = 0.4
    primary_length: int = PRIMARY_RIR_LENGTH
    secondary_length: int = SECONDARY_RIR_LENGTH

    @classmethod
    def desk(cls, rt60: float = 0.2, **kw) -> "AncGeometry":
        """The reference layout shifted into a 6 x 4 x 3 m room."""
        room = RoomSetup((6.0, 4.0, 3.0), rt60)
        return cls(room, (3.5, 2.0, 1.5), (2.3, 2.0, 1.5), (2.1, 2.0, 1.5), **kw)

    def __post_init__(self):
        for name in ("array_center", "secondary_source", "error_mic"):
            _check_inside(self.room, getattr(self, name), name)
        for doa in (0.0, 90.0, 180.0, 270.0):
            _check_inside(self.room, source_position(self.array_center, doa, self.radius), "source circle")

    @property
    def array(self) -> MicArray:
        return MicArray.tetrahedral(self.array_center)

    def receivers(self) -> list[CardioidMic]:
        """Reference capsules followed by the (omni) error microphone."""
        return self.array.capsules + [CardioidMic(self.error_mic)]

    def primary_rirs(self, doa_deg: float) -> np.ndarray:
        """(J + 1, primary_length): capsule RIRs then the error-mic RIR."""
        src = source_position(self.array_center, doa_deg, self.radius)
        return simulate_rirs(self.room, src, self.receivers(), self.primary_length)

    def secondary_taps(self) -> np.ndarray:
        return simulate_rirs(self.room, self.secondary_source, [CardioidMic(self.error_mic)],
                             self.secondary_length)[0]

    def render(self, noise, doa_fn, n_samples: int, block: int = 1000, lead: int = PRIMARY_RIR_LENGTH):
        """Capsule signals (J, n) and disturbance (n,) for a moving source.

        ``doa_fn`` takes seconds from the start of the output; ``noise`` must
        hold ``lead + n_samples`` samples, the lead only warms up the room.
        """
        fs = self.room.sample_rate
        out = render_moving_source(
            noise, lambda t: doa_fn(np.asarray(t) - lead / fs), self.room, self.array_center, self.radius,
            self.receivers(), n_samples + lead, block, self.primary_length,
        )[:, lead:]
        return out[:-1], out[-1]
