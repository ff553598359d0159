"""Gold-layer windows: features, ADA labels, synthetic CGM traces and splits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import Trace, ols_slope

WINDOW = 10
CADENCE_MIN = 5.0
GLUCOSE_DIVISOR = 400.0
SLOPE_DIVISOR = 10.0  # mg/dL/min mapped to 1.0

FEATURE_NAMES = (
    "last_glucose_norm",
    "mean_glucose_norm",
    "min_glucose_norm",
    "max_glucose_norm",
    "abs_slope_norm",
    "signed_slope_norm",
    "glucose_std_norm",
    "glucose_range_norm",
    "time_below_70_pct",
    "time_above_180_pct",
)
GOLD_HEADER = FEATURE_NAMES + ("label", "source", "window_id")


@dataclass(frozen=True)
class Window:
    glucose: np.ndarray
    timestamps: np.ndarray
    hypo_event: bool = False

    def __post_init__(self):
        g = np.asarray(self.glucose, dtype=np.float64)
        t = np.asarray(self.timestamps, dtype=np.float64)
        if g.shape != (WINDOW,) or t.shape != (WINDOW,):
            raise ValueError(f"a window holds exactly {WINDOW} readings")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(t))):
            raise ValueError("window values must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("window timestamps must strictly increase")
        object.__setattr__(self, "glucose", g)
        object.__setattr__(self, "timestamps", t)

    @property
    def last(self) -> float:
        return float(self.glucose[-1])

    @property
    def slope(self) -> float:
        """Least-squares trend over the window in mg/dL per minute."""
        return ols_slope(self.timestamps, self.glucose)


def window_slopes(g: np.ndarray, t: np.ndarray) -> np.ndarray:
    tc = t - t.mean(axis=1, keepdims=True)
    gc = g - g.mean(axis=1, keepdims=True)
    return (tc * gc).sum(axis=1) / (tc * tc).sum(axis=1)


def extract_features_batch(g: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Gold features for windows given as (N, 10) glucose and timestamp arrays."""
    g = np.asarray(g, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    slope = window_slopes(g, t)
    gmin, gmax = g.min(axis=1), g.max(axis=1)
    cols = [
        g[:, -1] / GLUCOSE_DIVISOR,
        g.mean(axis=1) / GLUCOSE_DIVISOR,
        gmin / GLUCOSE_DIVISOR,
        gmax / GLUCOSE_DIVISOR,
        np.abs(slope) / SLOPE_DIVISOR,
        np.clip(slope / SLOPE_DIVISOR, -1.0, 1.0) / 2.0 + 0.5,
        g.std(axis=1) / GLUCOSE_DIVISOR,
        (gmax - gmin) / GLUCOSE_DIVISOR,
        (g < 70.0).mean(axis=1),
        (g > 180.0).mean(axis=1),
    ]
    return np.clip(np.stack(cols, axis=1), 0.0, 1.0)


def extract_features(w: Window) -> np.ndarray:
    """The 10 normalised features of one window, in ``FEATURE_NAMES`` order."""
    return extract_features_batch(w.glucose[None, :], w.timestamps[None, :])[0]


def ada_labels(last: np.ndarray, slope: np.ndarray, hypo: np.ndarray | None = None) -> np.ndarray:
    """Vectorised ADA 2023 severity labels (0 LOW, 1 MEDIUM, 2 HIGH)."""
    last = np.asarray(last, dtype=np.float64)
    a = np.abs(np.asarray(slope, dtype=np.float64))
    high = (last < 54) | (last > 250) | (a > 3)
    medium = ((last >= 54) & (last < 70)) | ((last > 180) & (last <= 250)) | ((a >= 2) & (a <= 3))
    if hypo is not None:
        high |= np.asarray(hypo, dtype=bool)
    return np.where(high, 2, np.where(medium, 1, 0)).astype(np.int64)


def ada_label(w: Window) -> int:
    """Priority labelling: hypo annotation, then Level-2 limits, then borderline bands."""
    return int(ada_labels(np.array([w.last]), np.array([w.slope]), np.array([w.hypo_event]))[0])


def _segments(t: np.ndarray, cadence: float) -> list[tuple[int, int]]:
    """Index ranges that contain no gap of more than one missed reading."""
    breaks = np.flatnonzero(np.diff(t) > 2.5 * cadence) + 1
    bounds = np.concatenate([[0], breaks, [t.size]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class WindowArrays:
    glucose: np.ndarray    # (N, 10)
    t: np.ndarray          # (N, 10)
    hypo: np.ndarray       # (N,)
    end_index: np.ndarray  # index of each window's last reading in the trace

    def __len__(self) -> int:
        return len(self.hypo)


def window_arrays(trace: Trace, cadence: float = CADENCE_MIN) -> WindowArrays:
    """Stride-1 windows; a window inherits ``hypo_event`` from any annotated reading."""
    gs, ts, hs, ends = [], [], [], []
    hypo = trace.hypo
    for a, b in _segments(trace.t, cadence):
        if b - a < WINDOW:
            continue
        gs.append(sliding_window_view(trace.glucose[a:b], WINDOW))
        ts.append(sliding_window_view(trace.t[a:b], WINDOW))
        hs.append(sliding_window_view(hypo[a:b], WINDOW).any(axis=1))
        ends.append(np.arange(a + WINDOW - 1, b))
    if not gs:
        empty = np.empty((0, WINDOW))
        return WindowArrays(empty, empty, np.empty(0, bool), np.empty(0, np.int64))
    return WindowArrays(np.concatenate(gs), np.concatenate(ts), np.concatenate(hs),
                        np.concatenate(ends))


def slide_windows(trace: Trace, cadence: float = CADENCE_MIN) -> list[Window]:
    wa = window_arrays(trace, cadence)
    return [Window(g, t, bool(h)) for g, t, h in zip(wa.glucose, wa.t, wa.hypo)]


# --- Gold set -----------------------------------------------------------------

@dataclass
class GoldSet:
    features: np.ndarray
    labels: np.ndarray
    source: np.ndarray
    window_id: np.ndarray
    # Only known when built from traces; None after reading a Gold file.
    hypo_event: np.ndarray | None = None
    last_mgdl: np.ndarray | None = None
    slope_mgdl: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def patient(self) -> np.ndarray:
        return np.array([w.split(":", 1)[0] for w in self.window_id])

    def subset(self, idx) -> "GoldSet":
        opt = lambda a: None if a is None else a[idx]
        return GoldSet(self.features[idx], self.labels[idx], self.source[idx],
                       self.window_id[idx], opt(self.hypo_event), opt(self.last_mgdl),
                       opt(self.slope_mgdl))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=3)

    @classmethod
    def concat(cls, parts: Sequence["GoldSet"]) -> "GoldSet":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(*(cat(n) for n in ("features", "labels", "source", "window_id",
                                      "hypo_event", "last_mgdl", "slope_mgdl")))


def gold_from_trace(trace: Trace, source: str = "external", cadence: float = CADENCE_MIN) -> GoldSet:
    wa = window_arrays(trace, cadence)
    feats = extract_features_batch(wa.glucose, wa.t) if len(wa) else np.empty((0, 10))
    slope = window_slopes(wa.glucose, wa.t) if len(wa) else np.empty(0)
    last = wa.glucose[:, -1] if len(wa) else np.empty(0)
    labels = ada_labels(last, slope, wa.hypo)
    ids = np.array([f"{trace.patient}:{i:06d}" for i in wa.end_index], dtype=object)
    return GoldSet(feats, labels, np.full(len(wa), source, dtype=object), ids,
                   wa.hypo.copy(), last.copy(), slope)


def build_gold(traces: Iterable[Trace], source: str = "external") -> GoldSet:
    return GoldSet.concat([gold_from_trace(tr, source) for tr in traces])


def write_gold(gold: GoldSet, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GOLD_HEADER)
        for f, y, s, wid in zip(gold.features, gold.labels, gold.source, gold.window_id):
            w.writerow([repr(float(v)) for v in f] + [int(y), s, wid])


def read_gold(path: str | Path) -> GoldSet:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != GOLD_HEADER:
            raise ValueError(f"{path}: unexpected Gold header")
        rows = list(reader)
    n = len(rows)
    feats = np.array([[float(v) for v in r[:10]] for r in rows]).reshape(n, 10)
    labels = np.array([int(r[10]) for r in rows], dtype=np.int64)
    return GoldSet(feats, labels, np.array([r[11] for r in rows], dtype=object),
                   np.array([r[12] for r in rows], dtype=object))


# --- splitting ----------------------------------------------------------------

DEFAULT_FRACTIONS = (0.90, 0.055, 0.045)


def allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to the given fractions."""
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (quotas[i] - counts[i], -i), reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(gold: GoldSet, fractions: Sequence[float] = DEFAULT_FRACTIONS,
          seed: int = 0) -> tuple[GoldSet, ...]:
    """Patient-level train/val/test split; no patient spans two splits."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    patients = np.array(sorted(set(gold.patient)))
    if len(patients) < len(fractions):
        raise ValueError(f"{len(patients)} patients cannot fill {len(fractions)} splits")
    rng = np.random.default_rng(seed)
    patients = patients[rng.permutation(len(patients))]
    counts = allocate(len(patients), fractions)
    # small cohorts: no split may come out empty
    for k in range(len(counts)):
        if counts[k] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] = 1
    owner = {}
    start = 0
    for k, c in enumerate(counts):
        for p in patients[start:start + c]:
            owner[p] = k
        start += c
    which = np.array([owner[p] for p in gold.patient])
    return tuple(gold.subset(np.flatnonzero(which == k)) for k in range(len(fractions)))


# --- synthetic traces ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Virtual-patient generator standing in for real CGM cohorts."""

    n_patients: int = 30
    days: float = 14.0
    meal_rate: float = 5.0       # meals per day
    crash_rate: float = 0.8      # insulin-overshoot crashes per day
    noise_sd: float = 2.5        # mg/dL
    hypo_annotation_rate: float = 0.8
    seed: int = 0
    cadence: float = CADENCE_MIN
    baseline_low: float = 130.0  # per-patient mean glucose range, mg/dL
    baseline_high: float = 170.0
    meal_amp_mean: float = 75.0  # mean meal excursion height, mg/dL

    def __post_init__(self):
        for name in ("meal_rate", "crash_rate", "noise_sd", "hypo_annotation_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_patients < 1 or self.days <= 0:
            raise ValueError("need at least one patient and a positive duration")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _bump(tau: np.ndarray, amp: float, t_peak: float) -> np.ndarray:
    """Gamma-shaped excursion peaking at ``t_peak`` minutes with height ``amp``."""
    x = np.clip(tau, 0.0, None) / t_peak
    return amp * x * np.exp(1.0 - x)


def _synth_patient(pid: int, cfg: SynthConfig, rng: np.random.Generator) -> Trace:
    n = int(round(cfg.days * 24 * 60 / cfg.cadence))
    t = np.arange(n) * cfg.cadence
    mu = rng.uniform(cfg.baseline_low, cfg.baseline_high)
    # mean-reverting baseline drift
    a = np.exp(-cfg.cadence / 180.0)
    drive = rng.normal(0.0, 12.0 * np.sqrt(1 - a * a), n)
    base = np.empty(n)
    x = 0.0
    for k in range(n):
        x = a * x + drive[k]
        base[k] = x
    g = np.clip(mu + base, 85.0, 185.0)

    duration = t[-1] + cfg.cadence
    for tm in rng.uniform(0.0, duration, rng.poisson(cfg.meal_rate * cfg.days)):
        amp = rng.gamma(8.0, cfg.meal_amp_mean / 8.0)
        g += _bump(t - tm, amp, rng.uniform(45.0, 90.0))

    hypo = np.zeros(n, dtype=bool)
    for tc in np.sort(rng.uniform(0.0, duration, rng.poisson(cfg.crash_rate * cfg.days))):
        i0 = int(tc // cfg.cadence)
        level = g[i0]
        nadir = rng.uniform(40.0, 62.0)
        depth = max(level - nadir, 10.0)
        rate = rng.uniform(2.0, 4.0)
        d_desc = max(depth / rate, 15.0)
        d_hold = rng.uniform(10.0, 30.0)
        d_rec = depth / rng.uniform(1.5, 3.5)
        tau = t - tc
        prof = np.where(tau < 0, 0.0,
                        np.where(tau < d_desc, tau / d_desc,
                                 np.where(tau < d_desc + d_hold, 1.0,
                                          np.clip(1.0 - (tau - d_desc - d_hold) / d_rec, 0.0, 1.0))))
        g -= depth * prof
        if rng.random() < 0.5:
            # rescue carbohydrates: rebound after the nadir
            g += _bump(tau - d_desc - d_hold * 0.5, rng.uniform(40.0, 140.0), rng.uniform(30.0, 50.0))
        if rng.random() < cfg.hypo_annotation_rate:
            lo = np.flatnonzero((g < 70.0) & (tau >= 0) & (tau < d_desc + d_hold + d_rec))
            if lo.size:
                hypo[max(lo[0] - 3, 0): lo[-1] + 1] = True

    g = np.clip(g + rng.normal(0.0, cfg.noise_sd, n), 40.0, 400.0)
    return Trace(t, g, hypo, patient=f"p{pid:03d}", meta={"mean": mu})


def synth_generate(cfg: SynthConfig = SynthConfig()) -> list[Trace]:
    """Annotated traces, one per virtual patient; bit-identical for a fixed seed."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    return [_synth_patient(i, cfg, np.random.default_rng(s)) for i, s in enumerate(seqs)]


def synth_gold(cfg: SynthConfig = SynthConfig()) -> GoldSet:
    return build_gold(synth_generate(cfg), source="synthetic")
