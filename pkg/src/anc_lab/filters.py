"""Direction-indexed control filters: multi-reference FxLMS pre-training,
fixed-filter playback, and the ``.ancw`` library format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .acoustics import SECONDARY_RIR_LENGTH
from .errors import CorruptLibrary, Diverged, EmptyFilter, NumericFault, ShapeError
from .signal import SAMPLE_RATE, MultichannelSignal, fir_filter

CONTROL_FILTER_LENGTH = 1024
N_REFERENCES = 4
GRID_RESOLUTION = 10.0
N_DIRECTIONS = 36
NRL_WINDOW = 8000


@dataclass
class ControlFilter:
    taps: np.ndarray  # (J, L)
    doa_deg: float = 0.0
    converged: bool = True
    history: np.ndarray | None = field(default=None, repr=False)  # NRL per window during training

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim == 1:
            self.taps = self.taps[None, :]
        if not np.all(np.isfinite(self.taps)):
            raise NumericFault("control filter has non-finite taps")

    @property
    def n_refs(self) -> int:
        return self.taps.shape[0]

    @property
    def length(self) -> int:
        return self.taps.shape[1]


@dataclass
class SecondaryPath:
    taps: np.ndarray
    estimate_taps: np.ndarray | None = None

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.estimate_taps is None:
            self.estimate_taps = self.taps.copy()
        self.estimate_taps = np.asarray(self.estimate_taps, dtype=np.float64)

    def with_mismatch(self, level: float, seed: int = 0) -> "SecondaryPath":
        """Estimate perturbed by white noise at ``level`` relative RMS."""
        rng = np.random.default_rng(seed)
        rms = np.sqrt(np.mean(self.taps**2))
        return SecondaryPath(self.taps, self.taps + level * rms * rng.standard_normal(self.taps.size))


@dataclass
class ControlFilterLibrary:
    filters: list[ControlFilter]
    grid_resolution: float = GRID_RESOLUTION

    def __post_init__(self):
        if not self.filters:
            raise ShapeError("library needs at least one filter")
        shape = self.filters[0].taps.shape
        if any(f.taps.shape != shape for f in self.filters):
            raise ShapeError("all library filters must share one (J, L) shape")

    @classmethod
    def from_array(cls, taps: np.ndarray, grid_resolution: float = GRID_RESOLUTION):
        taps = np.asarray(taps, dtype=np.float64)
        return cls([ControlFilter(t, v * grid_resolution) for v, t in enumerate(taps)], grid_resolution)

    @classmethod
    def zeros(cls, v: int = N_DIRECTIONS, j: int = N_REFERENCES, length: int = CONTROL_FILTER_LENGTH):
        return cls.from_array(np.zeros((v, j, length)), 360.0 / v)

    def __len__(self) -> int:
        return len(self.filters)

    def __getitem__(self, v: int) -> ControlFilter:
        return self.filters[v]

    def as_array(self) -> np.ndarray:
        return np.stack([f.taps for f in self.filters])

    @property
    def doas(self) -> np.ndarray:
        return np.array([f.doa_deg for f in self.filters])


def filter_reference(r: MultichannelSignal, s_hat) -> MultichannelSignal:
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.size == 0:
        raise EmptyFilter("secondary-path estimate is empty")
    return MultichannelSignal(fir_filter(r.samples, s_hat), r.sample_rate)


def fxlms_step(w: ControlFilter, r_prime_window, e: float, mu: float) -> ControlFilter:
    """One update ``w + mu * r' * e``.

    ``r_prime_window[j, l]`` is the filtered reference of channel ``j``
    delayed by ``l`` samples, matching the tap layout of ``w``.
    """
    window = np.asarray(r_prime_window, dtype=np.float64)
    if window.shape != w.taps.shape:
        raise ShapeError(f"window shape {window.shape} does not match filter {w.taps.shape}")
    if not (math.isfinite(e) and np.all(np.isfinite(window))):
        raise NumericFault("non-finite error sample or reference window")
    return ControlFilter(w.taps + mu * window * e, w.doa_deg, w.converged)


@njit(cache=True, fastmath=False)
def _fxlms_kernel(r_pad, rp_pad, d, s, w_rev, mu, window, floor_db):
    """Sample-by-sample multi-reference FxLMS.

    ``r_pad``/``rp_pad`` carry L-1 leading zeros so tap ``k`` of the reversed
    filter ``w_rev`` multiplies sample ``n + k`` of the padded arrays.  Stops
    early when the NRL of a completed window drops below ``floor_db``.
    Returns (e, y, windows_done, diverged).
    """
    j_refs, length = w_rev.shape
    n_samples = d.shape[0]
    ns = s.shape[0]
    e = np.zeros(n_samples)
    y = np.zeros(n_samples)
    d_acc = 0.0
    e_acc = 0.0
    count = 0
    windows = 0
    for n in range(n_samples):
        acc = 0.0
        for j in range(j_refs):
            for k in range(length):
                acc += w_rev[j, k] * r_pad[j, n + k]
        y[n] = acc
        sy = 0.0
        kmax = ns if ns <= n + 1 else n + 1
        for k in range(kmax):
            sy += s[k] * y[n - k]
        en = d[n] - sy
        e[n] = en
        if mu != 0.0:
            g = mu * en
            for j in range(j_refs):
                for k in range(length):
                    w_rev[j, k] += g * rp_pad[j, n + k]
        d_acc += d[n] * d[n]
        e_acc += en * en
        count += 1
        if count == window:
            windows += 1
            if not np.isfinite(e_acc) or (d_acc > 0.0 and e_acc > 0.0
                                          and 10.0 * np.log10(d_acc / e_acc) < floor_db):
                return e, y, windows, True
            d_acc = 0.0
            e_acc = 0.0
            count = 0
    return e, y, windows, False


@dataclass
class FxlmsRun:
    taps: np.ndarray
    error: np.ndarray
    control: np.ndarray
    diverged: bool
    halted_at: int | None = None  # first sample of the window that tripped the check


def run_fxlms(
    reference: np.ndarray,
    disturbance: np.ndarray,
    secondary: SecondaryPath,
    mu: float,
    initial: np.ndarray | None = None,
    length: int = CONTROL_FILTER_LENGTH,
    divergence_db: float = -6.0,
) -> FxlmsRun:
    """Adapt a (J, length) filter over the whole record with plain FxLMS."""
    r = np.ascontiguousarray(np.atleast_2d(reference), dtype=np.float64)
    d = np.ascontiguousarray(disturbance, dtype=np.float64)
    if r.shape[1] != d.size:
        raise ShapeError("reference and disturbance lengths differ")
    rp = fir_filter(r, secondary.estimate_taps)
    pad = ((0, 0), (length - 1, 0))
    r_pad = np.ascontiguousarray(np.pad(r, pad))
    rp_pad = np.ascontiguousarray(np.pad(rp, pad))
    w = np.zeros((r.shape[0], length)) if initial is None else np.asarray(initial, dtype=np.float64)
    w_rev = np.ascontiguousarray(w[:, ::-1])
    e, y, windows, diverged = _fxlms_kernel(
        r_pad, rp_pad, d, np.ascontiguousarray(secondary.taps), w_rev, float(mu), NRL_WINDOW, divergence_db
    )
    halted = (windows - 1) * NRL_WINDOW if diverged else None
    return FxlmsRun(w_rev[:, ::-1].copy(), e, y, bool(diverged), halted)


def stable_step_size(filtered_reference: np.ndarray, length: int, delay: int, safety: float = 0.5) -> float:
    """Step size ``safety`` times the FxLMS bound 2 / (P (J*L + 2*delay))."""
    rp = np.atleast_2d(filtered_reference)
    power = np.mean(rp**2)
    if power == 0:
        return 0.0
    return safety * 2.0 / (power * (rp.shape[0] * length + 2 * delay))


def windowed_nrl(d: np.ndarray, e: np.ndarray, window: int = NRL_WINDOW) -> np.ndarray:
    """NRL in dB over consecutive non-overlapping windows."""
    n = min(d.size, e.size) // window
    dd = (d[: n * window].reshape(n, window) ** 2).sum(1)
    ee = (e[: n * window].reshape(n, window) ** 2).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10 * np.log10(dd / ee)
    return np.where(ee > 0, out, 120.0)


def playback(taps: np.ndarray, reference: np.ndarray, disturbance: np.ndarray, secondary_taps) -> np.ndarray:
    """Residual of a fixed multi-reference filter: ``d - s * (sum_j w_j * r_j)``."""
    y = sum(fir_filter(reference[j], taps[j]) for j in range(taps.shape[0]))
    return disturbance - fir_filter(y, secondary_taps)


def pretrain_filter(
    doa_deg: float,
    reference: np.ndarray,
    disturbance: np.ndarray,
    secondary: SecondaryPath,
    mu: float | None = None,
    length: int = CONTROL_FILTER_LENGTH,
    sample_rate: int = SAMPLE_RATE,
) -> ControlFilter:
    """Pre-train the filter for one DoA from a static excitation record.

    ``reference`` (J, N) and ``disturbance`` (N,) are the excitation as
    heard by the capsules and the error mic.  ``mu=None`` picks half the
    stability bound.  Convergence means the last 2 s beat the first 2 s and
    the fitted NRL trend moved by less than 0.5 dB across the final quarter.
    """
    reference = np.atleast_2d(reference)
    if not np.any(reference) or not np.any(disturbance):
        return ControlFilter(np.zeros((reference.shape[0], length)), doa_deg, converged=False)
    if mu is None:
        rp = fir_filter(reference, secondary.estimate_taps)
        mu = stable_step_size(rp, length, int(np.argmax(np.abs(secondary.taps))))
    run = run_fxlms(reference, disturbance, secondary, mu, length=length, divergence_db=-3.0)
    if run.diverged:
        raise Diverged(f"FxLMS pre-training diverged at DoA {doa_deg} deg (mu={mu:.3g})")
    two_s = 2 * sample_rate
    nrl_head = _nrl(disturbance[:two_s], run.error[:two_s])
    nrl_tail = _nrl(disturbance[-two_s:], run.error[-two_s:])
    history = windowed_nrl(disturbance, run.error)
    converged = nrl_tail > nrl_head and abs(_tail_drift(history)) < 0.5
    return ControlFilter(run.taps, doa_deg, converged, history)


def _tail_drift(history: np.ndarray) -> float:
    """dB change across the last quarter of ``history`` from a straight-line fit.

    A fit rather than two endpoints, since single windows jitter by about
    half a dB on band-limited noise.
    """
    tail = history[3 * history.size // 4 :]
    if tail.size < 2:
        return 0.0
    slope = np.polyfit(np.arange(tail.size), tail, 1)[0]
    return float(slope * (tail.size - 1))


def _nrl(d, e) -> float:
    ee = float(np.sum(e**2))
    return 120.0 if ee == 0 else 10 * math.log10(float(np.sum(d**2)) / ee)


LIBRARY_MAGIC = b"ANCW"
LIBRARY_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


def save_library(lib: ControlFilterLibrary, path):
    taps = lib.as_array().astype("<f8")
    v, j, n = taps.shape
    with open(Path(path), "wb") as f:
        f.write(_HEADER.pack(LIBRARY_MAGIC, LIBRARY_VERSION, v, j, n, float(lib.grid_resolution)))
        f.write(taps.tobytes(order="C"))


def load_library(path) -> ControlFilterLibrary:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptLibrary(f"{path}: file too short for a library header")
    magic, version, v, j, n, res = _HEADER.unpack_from(data)
    if magic != LIBRARY_MAGIC:
        raise CorruptLibrary(f"{path}: bad magic {magic!r}")
    if version != LIBRARY_VERSION:
        raise CorruptLibrary(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + v * j * n * 8:
        raise CorruptLibrary(f"{path}: payload does not match {v}x{j}x{n} header")
    taps = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(v, j, n).copy()
    return ControlFilterLibrary.from_array(taps, res)


def library_file_size(v: int, j: int, length: int) -> int:
    return _HEADER.size + v * j * length * 8



def train_library(
    geometry,
    duration: float = 30.0,
    seed: int = 0,
    safety: float = 0.1,
    n_directions: int = N_DIRECTIONS,
    length: int = CONTROL_FILTER_LENGTH,
    progress=None,
    rirs: np.ndarray | None = None,
) -> ControlFilterLibrary:
    """Pre-train one filter per grid DoA for an :class:`AncGeometry`.

    Each direction gets its own 2 kHz band-limited excitation (seed
    ``seed + v``) and a step size of ``safety`` times the stability bound.
    ``rirs`` is an optional precomputed (V, J + 1, length) primary stack.
    """
    from .acoustics import PRIMARY_RIR_LENGTH
    from .signal import lowpass_noise

    fs = geometry.room.sample_rate
    secondary = SecondaryPath(geometry.secondary_taps())
    delay = int(np.argmax(np.abs(secondary.taps)))
    resolution = 360.0 / n_directions
    n = int(round(duration * fs))
    lead = PRIMARY_RIR_LENGTH
    filters = []
    for v in range(n_directions):
        doa = v * resolution
        h = geometry.primary_rirs(doa) if rirs is None else rirs[v]
        x = lowpass_noise(n + lead, 2000.0, seed + v, sample_rate=fs)
        rec = np.stack([fir_filter(x, h[j]) for j in range(h.shape[0])])[:, lead:]
        reference, disturbance = rec[:-1], rec[-1]
        rp = fir_filter(reference, secondary.estimate_taps)
        mu = stable_step_size(rp, length, delay, safety)
        filters.append(pretrain_filter(doa, reference, disturbance, secondary, mu, length, fs))
        if progress:
            progress(v, n_directions, filters[-1])
    return ControlFilterLibrary(filters, resolution)
