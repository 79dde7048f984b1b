"""Stepsize-robustness benchmark: sweep base stepsizes, score All / Top-1 / Top-40%.

For every seed, domain and episode, each preset adapts the checkpoint at
every stepsize of a log-spaced grid. Episodes are paired across presets and
stepsizes, and presets whose ensemble phases coincide share one. Accuracies
are averaged over episodes, giving one curve per (preset, domain, seed).
Metrics are computed per seed and then summarised as mean and std over seeds.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .adapt import AdaptConfig, adapt_grid, ensemble_phase, preset
from .modelio import Checkpoint
from .tasks import DomainParams, episode_seed, sample_episode, shifted_domain

TOP_FRACTION = (2, 5)   # top 40%, as an exact ratio
METRICS = ("all", "top1", "top40")


class BenchError(RuntimeError):
    pass


def log_grid(lo: float = 1e-4, hi: float = 1.0, points: int = 25) -> np.ndarray:
    if points < 2 or not 0 < lo < hi:
        raise ValueError("need points >= 2 and 0 < lo < hi")
    grid = np.logspace(np.log10(lo), np.log10(hi), points)
    grid[0], grid[-1] = lo, hi
    return grid


def top_count(n: int) -> int:
    """ceil(0.4 * n) in exact integer arithmetic."""
    num, den = TOP_FRACTION
    return -(-num * n // den)


def curve_metrics(acc: Sequence[float]) -> dict[str, float]:
    """All (mean), Top-1 (max) and Top-40% (mean of the best ceil(0.4 n)) of one curve."""
    a = np.asarray(acc, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty accuracy curve")
    best = np.sort(a)[::-1][:top_count(a.size)]
    return {"all": float(a.mean()), "top1": float(a.max()), "top40": float(best.mean())}


def sign_test(wins: int, n: int) -> float:
    """One-sided sign-test p-value P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


@dataclass
class SweepConfig:
    presets: list[str]
    grid_min: float = 1e-4
    grid_max: float = 1.0
    points: int = 25
    episodes: int = 20
    shifts: dict[str, float] = field(default_factory=lambda: {"base": 0.0, "shift1": 1.0})
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    base_domain: DomainParams = field(default_factory=DomainParams)
    overrides: dict[str, Any] = field(default_factory=dict)   # applied to every preset
    workers: int = 1

    def validate(self) -> "SweepConfig":
        if self.points < 2 or self.episodes < 1:
            raise ValueError("need points >= 2 and episodes >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for name in self.presets:
            self.config(name)
        return self

    @property
    def grid(self) -> np.ndarray:
        return log_grid(self.grid_min, self.grid_max, self.points)

    def config(self, name: str) -> AdaptConfig:
        return preset(name, **self.overrides)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["base_domain"] = self.base_domain.to_dict()
        d.pop("workers")
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SweepConfig":
        d = dict(d)
        d["base_domain"] = DomainParams.from_dict(d["base_domain"])
        return cls(**d)


@dataclass
class SweepTable:
    """Mean query accuracy in percent, indexed (preset, domain, stepsize, seed)."""

    presets: list[str]
    domains: list[str]
    stepsizes: list[float]
    seeds: list[int]
    acc: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["preset", "domain", "stepsize", "seed", "accuracy"])
        for p, pn in enumerate(self.presets):
            for d, dn in enumerate(self.domains):
                for s, step in enumerate(self.stepsizes):
                    for k, seed in enumerate(self.seeds):
                        w.writerow([pn, dn, repr(float(step)), seed, repr(float(self.acc[p, d, s, k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise BenchError("empty sweep table")

        def ordered(key, conv=str):
            seen: dict[Any, None] = {}
            for r in rows:
                seen.setdefault(conv(r[key]), None)
            return list(seen)

        presets, domains = ordered("preset"), ordered("domain")
        steps, seeds = ordered("stepsize", float), ordered("seed", int)
        acc = np.full((len(presets), len(domains), len(steps), len(seeds)), np.nan)
        for r in rows:
            acc[presets.index(r["preset"]), domains.index(r["domain"]),
                steps.index(float(r["stepsize"])), seeds.index(int(r["seed"]))] = float(r["accuracy"])
        return cls(presets, domains, steps, seeds, acc)


def _episode_accuracies(checkpoint: Checkpoint, cfg: SweepConfig, episode,
                        ensemble_seed: int) -> dict[str, np.ndarray]:
    """Accuracy curve (over the grid) of every preset on one episode."""
    grid = cfg.grid
    configs = {name: replace(cfg.config(name), seed=ensemble_seed) for name in cfg.presets}
    shared: dict[tuple, list[str]] = defaultdict(list)
    for name, c in configs.items():
        if c.needs_ensemble:
            shared[c.ensemble_key()].append(name)
    phases = {}
    for key, names in shared.items():
        kinds = sorted({k for n in names for k in configs[n].aug_kinds})
        phases[key] = ensemble_phase(checkpoint.spec, checkpoint.params, episode.support,
                                     configs[names[0]], grid, kinds)
    out = {}
    for name, c in configs.items():
        phase = phases.get(c.ensemble_key()) if c.needs_ensemble else None
        try:
            results = adapt_grid(checkpoint, episode, c, grid, phase=phase)
        except Exception as exc:
            raise BenchError(f"preset {name}: {exc}") from exc
        out[name] = np.array([r.query_accuracy for r in results])
    return out


def _run_seed(args) -> np.ndarray:
    checkpoint, cfg, seed = args
    acc = np.zeros((len(cfg.presets), len(cfg.shifts), cfg.points))
    for d, (dname, shift) in enumerate(cfg.shifts.items()):
        domain = shifted_domain(cfg.base_domain, shift)
        for e in range(cfg.episodes):
            episode = sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                                     episode_seed(seed, "bench:" + dname, e))
            try:
                curves = _episode_accuracies(checkpoint, cfg, episode,
                                             episode_seed(seed, "bench-ensemble", e))
            except BenchError as exc:
                raise BenchError(f"seed {seed}, domain {dname}, episode {e}: {exc}") from exc
            for p, name in enumerate(cfg.presets):
                acc[p, d] += curves[name]
    return 100.0 * acc / cfg.episodes


def sweep(checkpoint: Checkpoint, cfg: SweepConfig) -> SweepTable:
    """Run the benchmark; the table depends only on (checkpoint, cfg), not on ``workers``."""
    cfg.validate()
    jobs = [(checkpoint, cfg, s) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    else:
        per_seed = [_run_seed(j) for j in jobs]
    acc = np.stack(per_seed, axis=-1)
    return SweepTable(list(cfg.presets), list(cfg.shifts), [float(s) for s in cfg.grid],
                      list(cfg.seeds), acc)


# -- metrics ------------------------------------------------------------------------

@dataclass
class Series:
    preset: str
    domain: str
    stepsizes: list[float]
    mean: list[float]                       # per stepsize, over seeds
    std: list[float]
    per_seed: dict[str, list[float]]        # metric -> value per seed
    summary: dict[str, tuple[float, float]]  # metric -> (mean, std) over seeds


@dataclass
class MetricsReport:
    series: list[Series]
    seeds: list[int]
    metadata: dict[str, Any] = field(default_factory=dict)

    def get(self, preset: str, domain: str) -> Series:
        for s in self.series:
            if s.preset == preset and s.domain == domain:
                return s
        raise KeyError((preset, domain))

    def to_dict(self) -> dict[str, Any]:
        return {"seeds": self.seeds, "metadata": self.metadata,
                "series": [{**asdict(s), "summary": {k: list(v) for k, v in s.summary.items()}}
                           for s in self.series]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricsReport":
        series = [Series(**{**s, "summary": {k: tuple(v) for k, v in s["summary"].items()}})
                  for s in d["series"]]
        return cls(series, d["seeds"], d["metadata"])


def metrics(table: SweepTable) -> MetricsReport:
    if table.acc.size == 0:
        raise BenchError("empty sweep table")
    series = []
    G = len(table.stepsizes)
    for p, pn in enumerate(table.presets):
        for d, dn in enumerate(table.domains):
            curves = table.acc[p, d]                    # (G, S)
            per_seed = {m: [] for m in METRICS}
            for k in range(len(table.seeds)):
                for m, v in curve_metrics(curves[:, k]).items():
                    per_seed[m].append(v)
            summary = {m: (float(np.mean(v)), float(np.std(v))) for m, v in per_seed.items()}
            series.append(Series(pn, dn, [float(v) for v in table.stepsizes], curves.mean(axis=1).tolist(),
                                 curves.std(axis=1).tolist(), per_seed, summary))
    meta = {"top_fraction": "2/5", "top_count": top_count(G), "grid_points": G,
            "std": "population std over seeds", "unit": "percent"}
    return MetricsReport(series, list(table.seeds), meta)


# -- emission -----------------------------------------------------------------------

def report_csv(report: MetricsReport) -> tuple[str, str]:
    """(curves CSV: preset, domain, stepsize, mean, std; metrics CSV with mean/std per metric)."""
    a, b = io.StringIO(), io.StringIO()
    wa = csv.writer(a, lineterminator="\n")
    wa.writerow(["preset", "domain", "stepsize", "mean", "std"])
    wb = csv.writer(b, lineterminator="\n")
    wb.writerow(["preset", "domain"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
    for s in report.series:
        for step, m, sd in zip(s.stepsizes, s.mean, s.std):
            wa.writerow([s.preset, s.domain, repr(float(step)), repr(float(m)), repr(float(sd))])
        wb.writerow([s.preset, s.domain] + [repr(float(v)) for m in METRICS for v in s.summary[m]])
    return a.getvalue(), b.getvalue()


def parse_report_csv(curves: str, summary: str) -> dict[tuple[str, str], dict[str, Any]]:
    out: dict[tuple[str, str], dict[str, Any]] = {}
    for r in csv.DictReader(io.StringIO(curves)):
        e = out.setdefault((r["preset"], r["domain"]), {"stepsizes": [], "mean": [], "std": []})
        e["stepsizes"].append(float(r["stepsize"]))
        e["mean"].append(float(r["mean"]))
        e["std"].append(float(r["std"]))
    for r in csv.DictReader(io.StringIO(summary)):
        out[(r["preset"], r["domain"])]["summary"] = {
            m: (float(r[f"{m}_mean"]), float(r[f"{m}_std"])) for m in METRICS}
    return out


def _svg(report: MetricsReport, domain: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "repurpose", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for s in report.series:
            if s.domain != domain:
                continue
            line, = ax.plot(s.stepsizes, s.mean, marker="o", ms=3, label=s.preset)
            line.set_gid(f"series-{s.preset}")
        ax.set_xscale("log")
        ax.set_xlabel("base stepsize")
        ax.set_ylabel("query accuracy (%)")
        ax.set_title(domain)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit(report: MetricsReport, fmt: str, outdir: str | Path) -> list[Path]:
    """Write the report as ``csv`` (curves + metrics), ``json`` or one ``svg`` per domain."""
    if not report.series:
        raise BenchError("nothing to plot")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        curves, summary = report_csv(report)
        paths = [outdir / "curves.csv", outdir / "metrics.csv"]
        paths[0].write_text(curves)
        paths[1].write_text(summary)
        return paths
    if fmt == "json":
        path = outdir / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        return [path]
    if fmt == "svg":
        domains = list(dict.fromkeys(s.domain for s in report.series))
        paths = [outdir / f"curves_{d}.svg" for d in domains]
        for d, path in zip(domains, paths):
            _svg(report, d, path)
        return paths
    raise ValueError(f"unknown format {fmt!r}")
