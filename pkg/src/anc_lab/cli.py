"""``anc-lab``: RIRs -> filter library -> dataset -> CRNN -> scenario reports.

Each stage writes its artifact next to a ``.stamp`` file holding a hash of
the config sections and upstream artifacts it was built from; a stage whose
stamp still matches is skipped.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import METHODS, PipelineConfig, ScenarioConfig, from_dict, load_config, scenario_presets
from .errors import AncLabError, ConfigError, MissingDependency, NumericFault

log = logging.getLogger("anc_lab")

STAGES = ("gen-rirs", "train-filters", "gen-dataset", "train-crnn", "simulate", "report")
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class Layout:
    root: Path

    @property
    def rirs(self) -> Path:
        return self.root / "rirs.ancr"

    @property
    def secondary(self) -> Path:
        return self.root / "secondary.ancr"

    @property
    def library(self) -> Path:
        return self.root / "library.ancw"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def model(self) -> Path:
        return self.root / "model.ancn"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for sub in sorted(path.rglob("manifest.csv")):
            h.update(str(sub.relative_to(path)).encode())
            h.update(sub.read_bytes())
    else:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _stamp_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".stamp")


def stage_key(stage: str, sections: dict, upstream: list[Path]) -> str:
    blob = json.dumps({"stage": stage, "config": sections, "upstream": [file_hash(p) for p in upstream]},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def up_to_date(artifact: Path, key: str) -> bool:
    stamp = _stamp_path(artifact)
    return artifact.exists() and stamp.exists() and stamp.read_text().strip() == key


def write_stamp(artifact: Path, key: str):
    _stamp_path(artifact).write_text(key + "\n")


def _require(path: Path, hint: str):
    if not path.exists():
        raise MissingDependency(str(path), hint)


def geometry(cfg: PipelineConfig):
    from .acoustics import AncGeometry, RoomSetup

    p = cfg.plant
    return AncGeometry(RoomSetup(tuple(p.dimensions), p.rt60), tuple(p.array_center), tuple(p.secondary_source),
                       tuple(p.error_mic), p.radius)


# -- stages -------------------------------------------------------------------------------


def gen_rirs(cfg: PipelineConfig, lay: Layout, force=False) -> Path:
    from .acoustics import save_rir_cache

    key = stage_key("gen-rirs", cfg.section_dict("plant", "grid", "signal"), [])
    if not force and up_to_date(lay.rirs, key) and lay.secondary.exists():
        log.info("gen-rirs: up to date")
        return lay.rirs
    geom = geometry(cfg)
    res = cfg.grid.resolution
    stack = np.stack([geom.primary_rirs(v * res) for v in range(cfg.grid.n_directions)])
    save_rir_cache(lay.secondary, geom.secondary_taps()[None, None, :])
    save_rir_cache(lay.rirs, stack)
    write_stamp(lay.rirs, key)
    log.info("gen-rirs: wrote %s %s", lay.rirs, stack.shape)
    return lay.rirs


def train_filters(cfg: PipelineConfig, lay: Layout, force=False) -> Path:
    from .acoustics import load_rir_cache
    from .filters import save_library, train_library

    _require(lay.rirs, "run `anc-lab gen-rirs` first")
    key = stage_key("train-filters", {**cfg.section_dict("filters", "plant", "grid", "signal"), "seed": cfg.seed},
                    [lay.rirs])
    if not force and up_to_date(lay.library, key):
        log.info("train-filters: up to date")
        return lay.library
    rirs = load_rir_cache(lay.rirs)

    def progress(v, n, f):
        log.info("filter %2d/%d doa %5.1f  final-window NRL %.1f dB", v + 1, n, f.doa_deg,
                 f.history[-1] if len(f.history) else float("nan"))

    lib = train_library(geometry(cfg), cfg.filters.duration, cfg.seed, cfg.filters.safety, cfg.grid.n_directions,
                        cfg.signal.filter_length, progress, rirs=rirs)
    save_library(lib, lay.library)
    write_stamp(lay.library, key)
    return lay.library


def gen_dataset(cfg: PipelineConfig, lay: Layout, force=False) -> Path:
    from .dataset import build_dataset

    dcfg = replace(cfg.dataset, seed=cfg.seed)
    key = stage_key("gen-dataset", {"dataset": cfg.to_dict()["dataset"], "seed": cfg.seed}, [])
    marker = lay.dataset / "manifest.stamp-target"
    if not force and up_to_date(marker, key):
        log.info("gen-dataset: up to date")
        return lay.dataset
    splits = tuple(s for s in ("train", "val", "test") if getattr(dcfg, s) is not None)
    build_dataset(dcfg, lay.dataset, splits,
                  progress=lambda split, i, n: log.info("%s %d/%d", split, i + 1, n) if (i + 1) % 500 == 0 else None)
    marker.write_text(file_hash(lay.dataset) + "\n")
    write_stamp(marker, key)
    return lay.dataset


def train_crnn(cfg: PipelineConfig, lay: Layout, force=False) -> Path:
    from .controller import classification_accuracy
    from .predictor import CRNN, TrainConfig, evaluate, train
    from .dataset import SampleSet

    _require(lay.dataset / "train" / "manifest.csv", "run `anc-lab gen-dataset` first")
    key = stage_key("train-crnn", {**cfg.section_dict("training"), "seed": cfg.seed},
                    [lay.dataset / "manifest.stamp-target"])
    if not force and up_to_date(lay.model, key):
        log.info("train-crnn: up to date")
        return lay.model
    t = cfg.training
    tc = TrainConfig(t.epochs, t.batch_size, t.lr, cfg.seed, t.cosine, t.patience, t.dtype, t.time_budget_s)
    dtype = np.dtype(t.dtype)
    tr = SampleSet(lay.dataset / "train", dtype=dtype)
    va = SampleSet(lay.dataset / "val", dtype=dtype) if (lay.dataset / "val" / "manifest.csv").exists() else []
    model = CRNN(seed=cfg.seed, dtype=dtype)
    res = train(tr, va, tc, model)
    res.write_curves(lay.root / "curves.csv")
    metrics = {"best_epoch": res.best_epoch, "epochs_run": len(res.val_acc), "params": model.n_params,
               "cpu_seconds": round(res.cpu_seconds, 1)}
    for split in ("val", "test"):
        d = lay.dataset / split
        if (d / "manifest.csv").exists():
            p, l = evaluate(model, SampleSet(d, dtype=dtype))
            exact, within = classification_accuracy(p, l)
            metrics[split] = {"exact": exact, "within_one": within, "n": int(l.size)}
    (lay.root / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    model.save(lay.model)
    write_stamp(lay.model, key)
    return lay.model


def build_scenario(cfg: PipelineConfig, sc: ScenarioConfig):
    from .controller import Scenario
    from .signal import lowpass_noise

    geom = geometry(cfg)
    traj = sc.motion(cfg.signal.frame_seconds).trajectory(cfg.plant.radius, cfg.signal.frame_seconds)
    n = traj.n_frames * cfg.signal.frame_samples + geom.primary_length
    noise = lowpass_noise(n, sc.noise_cutoff, sc.seed)
    if sc.source_peak is not None:
        noise *= sc.source_peak / np.max(np.abs(noise))
    return Scenario(geom, traj, noise, sc.snr_db, sc.seed, name=sc.name)


def simulate(cfg: PipelineConfig, lay: Layout, scenarios: list[ScenarioConfig] | None = None,
             methods: list[str] | None = None, force=False) -> list[Path]:
    from .controller import (prepare_plant, run_dsfanc, run_online_fxlms, run_oracle, run_pdsfanc,
                             write_psd_csv)
    from .filters import load_library
    from .predictor import CRNN

    sim = cfg.simulate
    methods = methods or sim.methods
    scenarios = scenarios if scenarios is not None else cfg.scenarios
    needs_lib = any(m in ("pd", "dsfanc", "oracle") for m in methods)
    needs_model = not sim.truth_doa and any(m in ("pd", "dsfanc") for m in methods)
    upstream = []
    if needs_model:
        _require(lay.model, "run `anc-lab train-crnn` first, or pass --truth-doa")
        upstream.append(lay.model)
    if needs_lib:
        _require(lay.library, "run `anc-lab train-filters` first")
        upstream.append(lay.library)
    lib = load_library(lay.library) if needs_lib else None
    model = CRNN.load(lay.model, dtype=np.dtype(cfg.training.dtype)) if needs_model else None
    outs = []
    for sc in scenarios:
        out = lay.reports / sc.name
        out.mkdir(parents=True, exist_ok=True)
        key = stage_key("simulate", {"scenario": sc.__dict__, "simulate": cfg.to_dict()["simulate"],
                                     "methods": methods, "plant": cfg.to_dict()["plant"]}, upstream)
        summary = out / "summary.csv"
        if not force and up_to_date(summary, key):
            log.info("simulate %s: up to date", sc.name)
            outs.append(out)
            continue
        plant = prepare_plant(build_scenario(cfg, sc))
        reports = []
        for m in methods:
            if m == "pd":
                r = run_pdsfanc(plant, lib, None if sim.truth_doa else model, sim.crossfade, sim.inference_budget_s)
            elif m == "dsfanc":
                r = run_dsfanc(plant, lib, model, sim.truth_doa, sim.crossfade)
            elif m == "oracle":
                r = run_oracle(plant, lib, sim.crossfade)
            else:
                r = run_online_fxlms(plant, sim.mu)
                if r.flags.get("diverged"):
                    log.warning("%s: online FxLMS diverged and was halted", sc.name)
            r.write_csv(out / f"{m}.csv")
            reports.append(r)
            log.info("%s %-7s mean NRL %6.2f dB", sc.name, m, r.mean_nrl())
        write_psd_csv(out / "psd.csv", reports)
        _write_summary(summary, sc.name, reports)
        if sim.plots:
            plot_scenario(out, reports)
        write_stamp(summary, key)
        outs.append(out)
    return outs


def _write_summary(path: Path, name: str, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scenario", "method", "mean_nrl_db", "overall_nrl_db", "mean_doa_error_deg", "diverged"])
        for r in reports:
            err = r.applied_doa_error()
            mean_err = float(np.nanmean(err)) if np.any(np.isfinite(err)) else float("nan")
            w.writerow([name, r.method, f"{r.mean_nrl():.6f}", f"{r.overall_nrl():.6f}", f"{mean_err:.6f}",
                        int(bool(r.flags.get("diverged", False)))])


def plot_scenario(out: Path, reports):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    from .signal import psd_freqs

    fig, ax = plt.subplots(3, 1, figsize=(7, 9))
    for r in reports:
        t = (np.arange(r.n_frames) + 1) * 0.5
        ax[1].plot(t, r.nrl_db, label=r.method)
        if r.method != "fxlms":
            ax[2].step(t, r.selected_class, where="pre", label=r.method)
        psd_db = 10 * np.log10(np.maximum(r.psd(), 1e-30))
        ax[0].plot(psd_freqs(1024, r.sample_rate), psd_db, label=r.method)
    ax[0].set_xlabel("Hz"), ax[0].set_ylabel("PSD (dB)"), ax[0].set_xlim(0, 2500)
    ax[1].set_xlabel("time (s)"), ax[1].set_ylabel("NRL (dB)")
    ax[2].set_xlabel("time (s)"), ax[2].set_ylabel("filter class")
    for a in ax:
        a.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "panels.png", dpi=110)
    plt.close(fig)


def report(cfg: PipelineConfig, lay: Layout, plots: bool = False) -> Path:
    """Concatenate per-scenario summaries into ``reports/summary.csv``."""
    rows, header = [], None
    found = sorted(lay.reports.glob("*/summary.csv")) if lay.reports.exists() else []
    if not found:
        raise MissingDependency(str(lay.reports), "run `anc-lab simulate` first")
    for p in found:
        with open(p, newline="") as f:
            r = list(csv.reader(f))
        header = r[0]
        rows.extend(r[1:])
        if plots:
            _plot_from_csv(p.parent)
    out = lay.reports / "summary.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    for row in rows:
        log.info("%-8s %-7s mean NRL %s dB", row[0], row[1], row[2])
    return out


def _plot_from_csv(folder: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plots")
        return
    fig, ax = plt.subplots(2, 1, figsize=(7, 6))
    for m in METHODS:
        p = folder / f"{m}.csv"
        if not p.exists():
            continue
        a = np.genfromtxt(p, delimiter=",", names=True)
        ax[0].plot(a["time_s"], a["nrl_db"], label=m)
        if m != "fxlms":
            ax[1].step(a["time_s"], a["selected_class"], where="pre", label=m)
    ax[1].step(a["time_s"], a["true_class"], "k--", where="pre", label="true")
    ax[0].set_ylabel("NRL (dB)"), ax[1].set_ylabel("filter class"), ax[1].set_xlabel("time (s)")
    for x in ax:
        x.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(folder / "nrl.png", dpi=110)
    plt.close(fig)


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force=False, out: Path | None = None) -> Layout:
    lay = Layout(Path(out or cfg.output_dir))
    lay.root.mkdir(parents=True, exist_ok=True)
    _set_threads(cfg.threads)
    for s in STAGES:
        if s not in stages:
            continue
        log.info("== %s", s)
        if s == "gen-rirs":
            gen_rirs(cfg, lay, force)
        elif s == "train-filters":
            train_filters(cfg, lay, force)
        elif s == "gen-dataset":
            gen_dataset(cfg, lay, force)
        elif s == "train-crnn":
            train_crnn(cfg, lay, force)
        elif s == "simulate":
            simulate(cfg, lay, force=force)
        else:
            report(cfg, lay, cfg.simulate.plots)
    return lay


def _set_threads(n):
    if not n:
        return
    try:
        import warnings

        import numba

        with warnings.catch_warnings():
            # an old system TBB only means numba falls back to another threading layer
            warnings.filterwarnings("ignore", message="The TBB threading layer")
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass


# -- argument parsing ---------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    def common_args(parser, default):
        # subcommands use SUPPRESS so they do not clobber options given before the subcommand
        parser.add_argument("--config", default=default, help="YAML pipeline config (default: built-in defaults)")
        parser.add_argument("--out", default=default, help="output directory (overrides output_dir)")
        parser.add_argument("--force", action="store_true", default=default or False,
                            help="rebuild even if the stamp matches")
        parser.add_argument("-v", "--verbose", action="store_true", default=default or False)

    common = argparse.ArgumentParser(add_help=False)
    common_args(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="anc-lab", description=__doc__.splitlines()[0])
    common_args(p, None)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-rirs", "simulate primary RIRs on the DoA grid and the secondary path"),
        ("train-filters", "pre-train one control filter per grid DoA"),
        ("gen-dataset", "render the labelled moving-source dataset"),
        ("train-crnn", "train the next-frame DoA predictor"),
    ]:
        sub.add_parser(name, help=help_, parents=[common])
    sim = sub.add_parser("simulate", help="run scenarios and write per-method CSV reports", parents=[common])
    which = sim.add_mutually_exclusive_group()
    which.add_argument("--preset", choices=sorted(scenario_presets()))
    which.add_argument("--scenario", help="YAML file with one scenario mapping")
    sim.add_argument("--methods", help="comma list of " + ",".join(METHODS))
    sim.add_argument("--truth-doa", action="store_true", help="feed ground-truth DoAs to both selectors")
    sim.add_argument("--hard-switch", action="store_true", help="no cross-fade between filters")
    sim.add_argument("--inference-budget", type=float, metavar="SECONDS",
                     help="keep the previous filter when a prediction overruns this time")
    sim.add_argument("--mu", type=float, help="online FxLMS step size")
    sim.add_argument("--plots", action="store_true")
    rep = sub.add_parser("report", help="collect scenario summaries (and plots)", parents=[common])
    rep.add_argument("--plots", action="store_true")
    run = sub.add_parser("run", help="all stages in order", parents=[common])
    run.add_argument("--stages", help="comma list restricting the stages")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        lay = Layout(Path(args.out or cfg.output_dir))
        lay.root.mkdir(parents=True, exist_ok=True)
        _set_threads(cfg.threads)
        cmd = args.command
        if cmd == "gen-rirs":
            gen_rirs(cfg, lay, args.force)
        elif cmd == "train-filters":
            train_filters(cfg, lay, args.force)
        elif cmd == "gen-dataset":
            gen_dataset(cfg, lay, args.force)
        elif cmd == "train-crnn":
            train_crnn(cfg, lay, args.force)
        elif cmd == "simulate":
            cfg = _simulate_overrides(cfg, args)
            scenarios = None
            if args.preset:
                scenarios = [cfg.scenario(args.preset)]
            elif args.scenario:
                scenarios = [load_scenario(args.scenario)]
            simulate(cfg, lay, scenarios, force=args.force)
        elif cmd == "report":
            report(cfg, lay, args.plots or cfg.simulate.plots)
        else:
            stages = STAGES if not args.stages else [s.strip() for s in args.stages.split(",")]
            bad = [s for s in stages if s not in STAGES]
            if bad:
                raise ConfigError(f"unknown stage(s) {bad}", "--stages")
            run_pipeline(cfg, stages, args.force, lay.root)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingDependency as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericFault as exc:
        log.error("numeric fault: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


def _simulate_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    sim = cfg.simulate
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        for i, m in enumerate(methods):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}", f"--methods[{i}]")
        sim = replace(sim, methods=methods)
    if args.truth_doa:
        sim = replace(sim, truth_doa=True)
    if args.hard_switch:
        sim = replace(sim, crossfade=0)
    if args.inference_budget is not None:
        sim = replace(sim, inference_budget_s=args.inference_budget)
    if args.mu is not None:
        if args.mu < 0:
            raise ConfigError("must be >= 0", "--mu")
        sim = replace(sim, mu=args.mu)
    if args.plots:
        sim = replace(sim, plots=True)
    return replace(cfg, simulate=sim)


def load_scenario(path) -> ScenarioConfig:
    import yaml

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file {p} not found", "--scenario")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}", "--scenario") from None
    sc = from_dict(ScenarioConfig, data, "scenario")
    replace(PipelineConfig(), scenarios=[sc]).validate()
    return sc


if __name__ == "__main__":
    sys.exit(main())
