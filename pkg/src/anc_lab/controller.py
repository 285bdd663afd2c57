"""Dual-rate selective fixed-filter control loop, its lagged and adaptive
baselines, and the noise-reduction metrics used to compare them.

The sample-rate part (``y = w^T r``, ``e = d - s * y``) is evaluated frame
by frame with block convolutions, which is exactly equivalent to the
per-sample recursion for filters that are constant within a frame.  The
frame-rate part calls a selector at every frame boundary with only the
audio observed so far.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import scipy.signal

from .acoustics import AncGeometry, MotionTrajectory, mix_at_snr
from .dataset import FRAME_SAMPLES, N_CONTEXT, circular_distance, doa_to_class
from .errors import ConfigError, ShapeError
from .filters import NRL_WINDOW, ControlFilterLibrary, SecondaryPath, run_fxlms
from .signal import MultichannelSignal, fir_filter, lowpass_noise, psd_freqs, welch_psd

NRL_CLAMP_DB = 120.0
CROSSFADE = 256
NO_FILTER = -1


class NrlClamped(UserWarning):
    pass


def compute_nrl(d, e) -> float:
    """``10 log10(sum d^2 / sum e^2)``; a silent residual clamps to +120 dB with a warning."""
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if d.shape != e.shape:
        raise ShapeError(f"disturbance {d.shape} and residual {e.shape} windows differ")
    ee = float(np.sum(e * e))
    if ee == 0.0:
        warnings.warn("zero residual energy; NRL clamped", NrlClamped, stacklevel=2)
        return NRL_CLAMP_DB
    dd = float(np.sum(d * d))
    if dd == 0.0:
        return -NRL_CLAMP_DB
    return 10.0 * math.log10(dd / ee)


def frame_nrl(d, e, window: int = NRL_WINDOW) -> np.ndarray:
    n = min(len(d), len(e)) // window
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NrlClamped)
        return np.array([compute_nrl(d[i * window : (i + 1) * window], e[i * window : (i + 1) * window])
                         for i in range(n)])


def classification_accuracy(predictions, labels, n_classes: int = 36) -> tuple[float, float]:
    """Exact-match fraction and within-one-class (circular) fraction."""
    p = np.asarray(predictions, dtype=int)
    l = np.asarray(labels, dtype=int)
    if p.shape != l.shape:
        raise ShapeError("predictions and labels differ in length")
    if p.size == 0:
        return 1.0, 1.0
    diff = np.abs(p - l) % n_classes
    diff = np.minimum(diff, n_classes - diff)
    return float(np.mean(diff == 0)), float(np.mean(diff <= 1))


@dataclass
class Scenario:
    geometry: AncGeometry
    trajectory: MotionTrajectory
    noise: np.ndarray
    snr_db: float = 30.0
    seed: int = 0
    block: int = 1000
    name: str = "scenario"

    def __post_init__(self):
        fs = self.geometry.room.sample_rate
        frame = self.trajectory.frame_length * fs
        if abs(frame - FRAME_SAMPLES) > 1e-9:
            raise ConfigError(f"frame length must be {FRAME_SAMPLES} samples", "trajectory.frame_length")
        if not np.isfinite(self.snr_db) and self.snr_db < 0:
            raise ConfigError("snr_db must be > -inf", "snr_db")

    @property
    def n_frames(self) -> int:
        return self.trajectory.n_frames

    @property
    def n_samples(self) -> int:
        return self.n_frames * FRAME_SAMPLES

    @property
    def duration(self) -> float:
        return self.trajectory.duration


@dataclass
class PlantSignals:
    """Everything the controllers see, rendered once per scenario."""

    reference: np.ndarray  # (J, N) noisy capsule signals
    disturbance: np.ndarray  # (N,)
    secondary: SecondaryPath
    frame_doas: np.ndarray  # true DoA at each frame centre
    true_classes: np.ndarray
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.frame_doas.size


def prepare_plant(scenario: Scenario, path_mismatch: float = 0.0) -> PlantSignals:
    geom = scenario.geometry
    fs = geom.room.sample_rate
    n = scenario.n_samples
    lead = geom.primary_length
    noise = np.asarray(scenario.noise, dtype=np.float64)
    if noise.size < n + lead:
        raise ShapeError(f"scenario noise has {noise.size} samples, needs {n + lead}")
    refs, d = geom.render(noise[: n + lead], scenario.trajectory.doa_at, n, scenario.block, lead)
    noisy = mix_at_snr(MultichannelSignal(refs, fs), scenario.snr_db, scenario.seed).samples
    secondary = SecondaryPath(geom.secondary_taps())
    if path_mismatch:
        secondary = secondary.with_mismatch(path_mismatch, scenario.seed)
    frame_doas = scenario.trajectory.frame_doas
    return PlantSignals(noisy, d, secondary, frame_doas, doa_to_class(frame_doas), fs)


class Selector(Protocol):
    def __call__(self, context: np.ndarray, m: int) -> int: ...


def _as_plant(x) -> PlantSignals:
    return prepare_plant(x) if isinstance(x, Scenario) else x


@dataclass
class SimulationReport:
    method: str
    nrl_db: np.ndarray
    selected_class: np.ndarray
    true_class: np.ndarray
    residual: np.ndarray
    disturbance: np.ndarray
    sample_rate: int = 16000
    frame_doas: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.nrl_db.size

    def mean_nrl(self, skip: int = 0) -> float:
        return float(np.mean(self.nrl_db[skip:]))

    def overall_nrl(self, skip_frames: int = 0) -> float:
        s = skip_frames * NRL_WINDOW
        return compute_nrl(self.disturbance[s:], self.residual[s:])

    def applied_doa_error(self) -> np.ndarray:
        """Circular error between the applied filter's DoA and the true frame DoA (NaN without filter)."""
        doas = self.frame_doas if self.frame_doas is not None else self.true_class * 10.0
        res = 360.0 / 36
        err = circular_distance(self.selected_class * res, doas)
        return np.where(self.selected_class == NO_FILTER, np.nan, err)

    def psd(self, nfft: int = 1024):
        return welch_psd(self.residual, nfft, 0.5, self.sample_rate)

    def write_csv(self, path):
        fs = self.sample_rate
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["frame", "time_s", "nrl_db", "selected_class", "true_class"])
            for m in range(self.n_frames):
                w.writerow([m, f"{(m + 1) * NRL_WINDOW / fs:.3f}", f"{self.nrl_db[m]:.6f}",
                            int(self.selected_class[m]), int(self.true_class[m])])


def write_psd_csv(path, reports: list[SimulationReport], nfft: int = 1024, include_disturbance: bool = True):
    fs = reports[0].sample_rate
    freqs = psd_freqs(nfft, fs)
    cols, names = [], []
    if include_disturbance:
        cols.append(welch_psd(reports[0].disturbance, nfft, 0.5, fs))
        names.append("anc_off")
    for r in reports:
        cols.append(r.psd(nfft))
        names.append(r.method)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["freq_hz"] + [f"psd_db_{n}" for n in names])
        for i, fr in enumerate(freqs):
            w.writerow([f"{fr:.3f}"] + [f"{10 * math.log10(max(c[i], 1e-30)):.6f}" for c in cols])


def fixed_filter_playback(
    plant: PlantSignals,
    library: ControlFilterLibrary,
    selected: np.ndarray,
    crossfade: int = CROSSFADE,
) -> np.ndarray:
    """Residual when frame ``m`` uses filter ``selected[m]`` (``-1`` = zero filter).

    On a change of filter the first ``crossfade`` samples of the frame blend
    the old and new filter outputs linearly; ``crossfade=0`` switches hard.
    """
    refs = plant.reference
    j, n = refs.shape
    taps = library.as_array()
    if taps.shape[1] != j:
        raise ConfigError(f"library has {taps.shape[1]} reference channels, plant has {j}", "library")
    length = taps.shape[2]
    padded = np.pad(refs, ((0, 0), (length - 1, 0)))
    y = np.zeros(n)
    ramp = (np.arange(1, crossfade + 1) / (crossfade + 1)) if crossfade else None

    def output(v, lo, hi):
        if v == NO_FILTER:
            return np.zeros(hi - lo)
        seg = padded[:, lo : hi + length - 1]
        return scipy.signal.oaconvolve(seg, taps[v], mode="valid", axes=1).sum(axis=0)

    prev = NO_FILTER
    for m, v in enumerate(selected):
        lo, hi = m * FRAME_SAMPLES, (m + 1) * FRAME_SAMPLES
        y[lo:hi] = output(int(v), lo, hi)
        if crossfade and v != prev and not (prev == NO_FILTER and v == NO_FILTER):
            k = min(crossfade, hi - lo)
            old = output(prev, lo, lo + k)
            y[lo : lo + k] = (1 - ramp[:k]) * old + ramp[:k] * y[lo : lo + k]
        prev = int(v)
    return plant.disturbance - fir_filter(y, plant.secondary.taps)


def _report(method, plant, selected, residual, flags=None) -> SimulationReport:
    return SimulationReport(method, frame_nrl(plant.disturbance, residual), np.asarray(selected, dtype=int),
                            plant.true_classes.copy(), residual, plant.disturbance, plant.sample_rate,
                            plant.frame_doas.copy(), flags or {})


def select_filters(plant: PlantSignals, selector: Callable[[np.ndarray, int], int], lag: int = 0,
                   k_context: int = N_CONTEXT, budget_s: float | None = None) -> tuple[np.ndarray, dict]:
    """Run the frame-rate loop.

    At the end of frame ``m`` (``m >= K-1``) ``selector`` receives frames
    ``m-K+1..m`` of the reference audio and returns a class; that class is
    applied to frame ``m + 1 + lag``.  Frames before the first decision use
    the zero filter.  With ``budget_s`` an overrunning call keeps the
    previous filter.
    """
    n_frames = plant.n_frames
    selected = np.full(n_frames, NO_FILTER, dtype=int)
    decisions = {}
    spans = []
    misses = 0
    for m in range(k_context - 1, n_frames - 1):
        lo, hi = (m - k_context + 1) * FRAME_SAMPLES, (m + 1) * FRAME_SAMPLES
        context = plant.reference[:, lo:hi]
        spans.append((m, lo, hi))
        t0 = time.perf_counter()
        v = int(selector(context, m))
        if budget_s is not None and time.perf_counter() - t0 > budget_s:
            misses += 1
            v = decisions.get(m - 1, NO_FILTER)
        decisions[m] = v
    for m, v in decisions.items():
        target = m + 1 + lag
        if target < n_frames:
            selected[target] = v
    # spans[i] = (m, first, last+1 sample seen); frame m+1+lag starts at (m+1+lag)*FRAME_SAMPLES
    return selected, {"deadline_misses": misses, "context_spans": spans}


def crnn_selector(model) -> Callable[[np.ndarray, int], int]:
    from .predictor import build_input_tensor

    def select(context, m):
        x = build_input_tensor(context).astype(model.dtype)
        return model.forward(x).predicted_class

    return select


def truth_selector(plant: PlantSignals, ahead: int) -> Callable[[np.ndarray, int], int]:
    """Ground truth of frame ``m + ahead`` (1 = next frame, 0 = current frame)."""

    def select(context, m):
        return int(plant.true_classes[min(m + ahead, plant.n_frames - 1)])

    return select


def run_pdsfanc(plant: PlantSignals, library: ControlFilterLibrary, model=None, crossfade: int = CROSSFADE,
                budget_s: float | None = None, selector=None) -> SimulationReport:
    """Predictive selection: the class predicted at the end of frame m drives frame m+1.

    ``model=None`` (and no ``selector``) uses the ground-truth next-frame class.
    """
    plant = _as_plant(plant)
    _check_grid(library, model)
    if selector is None:
        selector = crnn_selector(model) if model is not None else truth_selector(plant, 1)
    selected, flags = select_filters(plant, selector, 0, budget_s=budget_s)
    return _report("pd", plant, selected, fixed_filter_playback(plant, library, selected, crossfade), flags)


def run_dsfanc(plant: PlantSignals, library: ControlFilterLibrary, classifier=None, truth_doa: bool = True,
               crossfade: int = CROSSFADE) -> SimulationReport:
    """Lagged selection: the class of frame m is applied in frame m+1.

    ``truth_doa`` uses the true current-frame class; otherwise ``classifier``
    is a CRNN whose estimate for frame m (made at the end of frame m-1) is
    applied one frame late, or any ``(context, m) -> class`` callable that
    classifies the current frame.
    """
    plant = _as_plant(plant)
    if truth_doa or classifier is None:
        selected, flags = select_filters(plant, truth_selector(plant, 0), 0)
    elif hasattr(classifier, "forward"):
        _check_grid(library, classifier)
        selected, flags = select_filters(plant, crnn_selector(classifier), lag=1)
    else:
        selected, flags = select_filters(plant, classifier, 0)
    return _report("dsfanc", plant, selected, fixed_filter_playback(plant, library, selected, crossfade), flags)


def run_oracle(plant: PlantSignals, library: ControlFilterLibrary, crossfade: int = CROSSFADE) -> SimulationReport:
    """Fixed filter of the true frame DoA from the first frame on (no cold start)."""
    plant = _as_plant(plant)
    selected = plant.true_classes.copy()
    rep = _report("oracle", plant, selected, fixed_filter_playback(plant, library, selected, crossfade))
    return rep


def run_online_fxlms(plant: PlantSignals, mu: float = 1e-2, length: int | None = None,
                     divergence_db: float = -6.0) -> SimulationReport:
    """Sample-by-sample FxLMS from a zero filter; halts when a frame NRL < ``divergence_db``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mu == 0:
        plant = _as_plant(plant)
        none = np.full(plant.n_frames, NO_FILTER, dtype=int)
        return _report("fxlms", plant, none, plant.disturbance.copy(), {"diverged": False})
    plant = _as_plant(plant)
    length = length or 1024
    run = run_fxlms(plant.reference, plant.disturbance, plant.secondary, mu, length=length,
                    divergence_db=divergence_db)
    e = run.error.copy()
    flags = {"diverged": run.diverged}
    if run.diverged:
        # the controller is switched off from the window that blew up
        e[run.halted_at :] = plant.disturbance[run.halted_at :]
    selected = np.full(plant.n_frames, NO_FILTER, dtype=int)
    return _report("fxlms", plant, selected, e, flags)


def _check_grid(library: ControlFilterLibrary, model):
    if model is None or not hasattr(model, "config"):
        return
    if model.config["n_classes"] != len(library):
        raise ConfigError(
            f"model predicts {model.config['n_classes']} classes but library has {len(library)} filters", "model"
        )


def scenario_noise(n: int, seed: int = 0, sample_rate: int = 16000) -> np.ndarray:
    """Default source signal when no recording is given: 2 kHz band-limited noise."""
    return lowpass_noise(n, 2000.0, seed, sample_rate=sample_rate)
