"""Labelled moving-source samples for next-frame DoA training.

Each sample is K=4 frames of 4-channel capsule audio rendered along an
analytic motion law; the label is the grid class of the law evaluated one
frame past the window.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .acoustics import (
    PRIMARY_RIR_LENGTH,
    MicArray,
    MotionTrajectory,
    RoomSetup,
    render_moving_source,
    mix_at_snr,
)
from .errors import ConfigError, CorruptFile, TooShort
from .signal import SAMPLE_RATE, MultichannelSignal, lowpass_noise, read_wav

MODES = ("static", "constant-rate", "time-varying-rate")
N_CONTEXT = 4
FRAME_SAMPLES = 8000
GRID = 10.0
N_CLASSES = 36
VELOCITY_RANGE = (-12.0, 12.0)
AMPLITUDE_RANGE = (5.0, 55.0)
CYCLES_RANGE = (0.1, 0.2)


def doa_to_class(doa_deg, resolution: float = GRID, n_classes: int = N_CLASSES):
    """Nearest grid class, exact halves rounded down: 35 deg -> class 3 on a 10 deg grid."""
    q = np.ceil(np.mod(np.asarray(doa_deg, dtype=float), 360.0) / resolution - 0.5 - 1e-9)
    out = np.mod(q, n_classes).astype(int)
    return int(out) if out.ndim == 0 else out


def circular_distance(a, b):
    d = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 360.0))
    return np.minimum(d, 360.0 - d)


@dataclass
class MotionSpec:
    mode: str
    initial_doa: float
    angular_velocity: float = 0.0  # degrees per frame
    amplitude: float = 0.0  # degrees
    phase: float = 0.0  # radians
    cycles: float = 0.0  # cycles per K-frame window
    n_context: int = N_CONTEXT

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown motion mode {self.mode!r}")

    def doa(self, k):
        """Unwrapped DoA in degrees at (fractional) frame index ``k``."""
        k = np.asarray(k, dtype=float)
        if self.mode == "static":
            return self.initial_doa + 0.0 * k
        if self.mode == "constant-rate":
            return self.initial_doa + self.angular_velocity * k
        return self.initial_doa + self.amplitude * np.sin(
            2 * np.pi * self.cycles * k / self.n_context + self.phase
        )

    def frame_doas(self) -> np.ndarray:
        return np.mod(self.doa(np.arange(self.n_context)), 360.0)

    def next_frame_doa(self) -> float:
        return float(np.mod(self.doa(self.n_context), 360.0))

    def label(self) -> int:
        return doa_to_class(self.next_frame_doa())

    def trajectory(self, radius: float, frame_length: float = 0.5) -> MotionTrajectory:
        return MotionTrajectory(self.frame_doas(), radius, self.next_frame_doa(), frame_length,
                                law=lambda k: float(self.doa(k)))


def sample_motion(mode: str, rng_seed=None) -> MotionSpec:
    if mode not in MODES:
        raise ValueError(f"unknown motion mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    theta0 = float(rng.uniform(0.0, 360.0))
    if mode == "static":
        return MotionSpec(mode, theta0)
    if mode == "constant-rate":
        return MotionSpec(mode, theta0, angular_velocity=float(rng.uniform(*VELOCITY_RANGE)))
    return MotionSpec(
        mode,
        theta0,
        amplitude=float(rng.uniform(*AMPLITUDE_RANGE)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        cycles=float(rng.uniform(*CYCLES_RANGE)),
    )


@dataclass
class DatasetSample:
    audio: np.ndarray  # (J, K * frame)
    label: int
    meta: dict = field(default_factory=dict)


class NoiseBank:
    """Source signals: synthesized band-limited noise or excerpts of WAV files."""

    def __init__(self, directory=None, min_cutoff: float = 300.0, max_cutoff: float = 2000.0):
        self.files = sorted(Path(directory).glob("*.wav")) if directory else []
        if directory and not self.files:
            raise ConfigError(f"no .wav files in {directory}", "noise.directory")
        self.min_cutoff, self.max_cutoff = min_cutoff, max_cutoff

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.files:
            cutoff = rng.uniform(self.min_cutoff, self.max_cutoff)
            return lowpass_noise(n, cutoff, rng)
        path = self.files[int(rng.integers(len(self.files)))]
        x = read_wav(path).samples.mean(axis=0)
        if x.size < n:
            raise TooShort(f"{path} has {x.size} samples, need {n}")
        start = int(rng.integers(x.size - n + 1))
        seg = x[start : start + n]
        std = seg.std()
        return seg / std if std > 0 else seg


def render_sample(
    spec: MotionSpec,
    room: RoomSetup,
    array_center,
    noise: np.ndarray,
    snr_db: float,
    seed: int = 0,
    radius: float = 0.4,
    block: int = 1000,
    lead: int = PRIMARY_RIR_LENGTH,
    rir_length: int = PRIMARY_RIR_LENGTH,
) -> DatasetSample:
    """Render K frames of capsule audio along ``spec`` and attach its label.

    ``noise`` must hold ``lead + K*8000`` samples; the first ``lead``
    samples only warm up the room so the window starts in steady state.
    """
    fs = room.sample_rate
    n = spec.n_context * FRAME_SAMPLES
    noise = np.asarray(noise, dtype=float)
    if noise.size < n + lead:
        raise TooShort(f"noise has {noise.size} samples, need {n + lead}")
    frame_s = FRAME_SAMPLES / fs
    array = MicArray.tetrahedral(array_center)

    def doa_fn(t):
        return spec.doa((np.asarray(t) - lead / fs) / frame_s - 0.5)

    clean = render_moving_source(noise[: n + lead], doa_fn, room, array.center, radius, array.capsules,
                                 n + lead, block, rir_length)[:, lead:]
    noisy = mix_at_snr(MultichannelSignal(clean, fs), snr_db, seed)
    meta = dict(rt60=room.rt60, snr_db=snr_db, mode=spec.mode, seed=seed, motion=asdict(spec))
    return DatasetSample(noisy.samples, spec.label(), meta)


@dataclass
class RoomConfig:
    id: str
    dimensions: tuple[float, float, float]
    rt60s: list[float]
    n_positions: int = 8
    positions: list[tuple[float, float, float]] | None = None

    def array_positions(self, seed: int, radius: float) -> list[np.ndarray]:
        if self.positions:
            return [np.asarray(p, dtype=float) for p in self.positions]
        rng = np.random.default_rng([seed, _stable_hash(self.id)])
        margin = radius + 0.5
        lo = np.array([margin, margin, 1.0])
        hi = np.array([self.dimensions[0] - margin, self.dimensions[1] - margin,
                       min(2.2, self.dimensions[2] - 0.5)])
        if np.any(hi <= lo):
            raise ConfigError(f"room {self.id} too small for radius {radius}", f"rooms.{self.id}")
        return [lo + rng.random(3) * (hi - lo) for _ in range(self.n_positions)]


@dataclass
class SplitConfig:
    rooms: list[str]
    count: int
    snrs: list[float] | None = None  # discrete choices
    snr_range: tuple[float, float] | None = None  # uniform range


@dataclass
class DatasetConfig:
    rooms: list[RoomConfig]
    train: SplitConfig
    val: SplitConfig
    test: SplitConfig | None = None
    radius: float = 0.4
    seed: int = 0
    noise_dir: str | None = None
    block: int = 1000
    modes: tuple[str, ...] = MODES

    def room(self, room_id: str) -> RoomConfig:
        for r in self.rooms:
            if r.id == room_id:
                return r
        raise ConfigError(f"unknown room id {room_id!r}", "rooms")

    def validate(self):
        ids = [r.id for r in self.rooms]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate room ids", "rooms")
        for name in ("train", "val", "test"):
            split = getattr(self, name)
            if split is None:
                continue
            for rid in split.rooms:
                self.room(rid)
            if split.snrs is None and split.snr_range is None:
                raise ConfigError("needs snrs or snr_range", f"{name}")
        if self.test is not None:
            overlap = set(self.train.rooms) & set(self.test.rooms)
            if overlap:
                raise ConfigError(f"test rooms also used for training: {sorted(overlap)}", "test.rooms")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}", "modes")


def _stable_hash(text: str) -> int:
    h = 2166136261
    for ch in text.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}


def sample_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([master, SPLIT_INDEX[split], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ManifestRow:
    id: str
    label: int
    room: str
    rt60: float
    snr: float
    mode: str
    seed: int


def plan_sample(config: DatasetConfig, split: str, index: int):
    """Draw every random choice of one sample from its own seed."""
    sc: SplitConfig = getattr(config, split)
    seed = sample_seed(config.seed, split, index)
    rng = np.random.default_rng(seed)
    room_cfg = config.room(sc.rooms[int(rng.integers(len(sc.rooms)))])
    rt60 = float(room_cfg.rt60s[int(rng.integers(len(room_cfg.rt60s)))])
    positions = room_cfg.array_positions(config.seed, config.radius)
    center = positions[int(rng.integers(len(positions)))]
    if sc.snrs is not None:
        snr = float(sc.snrs[int(rng.integers(len(sc.snrs)))])
    else:
        snr = float(rng.uniform(*sc.snr_range))
    mode = config.modes[int(rng.integers(len(config.modes)))]
    spec = sample_motion(mode, rng)
    return seed, rng, room_cfg, rt60, center, snr, spec


def generate_sample(config: DatasetConfig, split: str, index: int, noise_bank: NoiseBank | None = None):
    seed, rng, room_cfg, rt60, center, snr, spec = plan_sample(config, split, index)
    bank = noise_bank or NoiseBank(config.noise_dir)
    noise = bank.draw(N_CONTEXT * FRAME_SAMPLES + PRIMARY_RIR_LENGTH, rng)
    room = RoomSetup(room_cfg.dimensions, rt60)
    sample = render_sample(spec, room, center, noise, snr, seed=seed, radius=config.radius, block=config.block)
    row = ManifestRow(f"{split}-{index:06d}", sample.label, room_cfg.id, rt60, snr, spec.mode, seed)
    sample.meta.update(room=room_cfg.id, center=center.tolist())
    return sample, row


TENSOR_MAGIC = b"ANCD"


def save_tensor(path, array: np.ndarray):
    a = np.ascontiguousarray(array, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise CorruptFile(f"{path}: bad tensor magic")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    off = 8 + 4 * ndim
    if len(data) != off + 4 * int(np.prod(shape)):
        raise CorruptFile(f"{path}: payload does not match shape {shape}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(shape).astype(np.float64)


MANIFEST_FIELDS = ["id", "label", "room", "rt60", "snr", "mode", "seed"]


def write_manifest(path, rows: Sequence[ManifestRow]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.id, r.label, r.room, repr(r.rt60), repr(r.snr), r.mode, r.seed])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as f:
        return [
            ManifestRow(d["id"], int(d["label"]), d["room"], float(d["rt60"]), float(d["snr"]), d["mode"],
                        int(d["seed"]))
            for d in csv.DictReader(f)
        ]


def build_dataset(config: DatasetConfig, out_dir, splits=("train", "val", "test"), progress=None) -> dict:
    """Render every split into ``out_dir/<split>/`` (manifest.csv + .ancd audio)."""
    config.validate()
    out = Path(out_dir)
    bank = NoiseBank(config.noise_dir)
    manifests = {}
    for split in splits:
        sc = getattr(config, split)
        if sc is None:
            continue
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(sc.count):
            sample, row = generate_sample(config, split, i, bank)
            save_tensor(d / f"{row.id}.ancd", sample.audio)
            rows.append(row)
            if progress:
                progress(split, i, sc.count)
        write_manifest(d / "manifest.csv", rows)
        manifests[split] = rows
    return manifests


class SampleSet:
    """Lazy (input tensor, label) view over one rendered split."""

    def __init__(self, directory, normalize: bool = True, dtype=np.float32):
        from .predictor import build_input_tensor

        self._features = build_input_tensor
        self.dir = Path(directory)
        self.rows = read_manifest(self.dir / "manifest.csv")
        self.labels = np.array([r.label for r in self.rows], dtype=int)
        self.normalize = normalize
        self.dtype = dtype

    def __len__(self):
        return len(self.rows)

    def audio(self, i: int) -> np.ndarray:
        return load_tensor(self.dir / f"{self.rows[i].id}.ancd")

    def __getitem__(self, i: int):
        x = self._features(self.audio(i), normalize=self.normalize).astype(self.dtype)
        return x, int(self.labels[i])


def label_check(rows_or_specs) -> float:
    """Fraction of specs whose stored label equals the re-evaluated motion law."""
    ok = 0
    total = 0
    for spec, label in rows_or_specs:
        total += 1
        ok += int(doa_to_class(np.mod(spec.doa(spec.n_context), 360.0)) == label)
    return ok / total if total else 1.0
