"""Non-spiking baselines: the ADA rule assessor, a dense MLP and energy accounting."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import GLUCOSE_DIVISOR, SLOPE_DIVISOR
from .snn import ARCHITECTURE
from .training import EvalReport, class_weights, cosine_lr, weighted_ce

log = logging.getLogger(__name__)


# --- rule assessor ------------------------------------------------------------

def rule_assess(last_glucose: float, slope: float) -> int:
    """Static ADA thresholds on the latest reading (mg/dL) and trend (mg/dL/min).

    Deliberately memoryless: it cannot see a clinician's hypo annotation.
    """
    if not (math.isfinite(last_glucose) and math.isfinite(slope)):
        raise ValueError("rule_assess needs finite inputs")
    a = abs(slope)
    if last_glucose < 54 or last_glucose > 250 or a > 3:
        return 2
    if 54 <= last_glucose < 70 or 180 < last_glucose <= 250 or 2 <= a <= 3:
        return 1
    return 0


def rule_inputs_from_features(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recover (last mg/dL, slope mg/dL/min) from normalised Gold features.

    Exact inside the feature ranges; saturated slopes (|s| > 10) come back as
    +-10, which sits on the same side of every rule threshold.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return f[:, 0] * GLUCOSE_DIVISOR, (f[:, 5] - 0.5) * 2.0 * SLOPE_DIVISOR


def rule_assess_features(features: np.ndarray) -> np.ndarray:
    last, slope = rule_inputs_from_features(features)
    return np.array([rule_assess(float(g), float(s)) for g, s in zip(last, slope)], dtype=np.int64)


# --- dense baseline -----------------------------------------------------------

@dataclass
class MlpNet:
    weights: list[np.ndarray]  # (fan_out, fan_in), same layout as SpikingNet
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: fan-in mismatch")

    @classmethod
    def init(cls, sizes: Sequence[int] = ARCHITECTURE, seed: int = 0) -> "MlpNet":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, math.sqrt(2.0 / fi), size=(fo, fi)))  # He init for ReLU
            bs.append(np.zeros(fo))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes: Sequence[int] = ARCHITECTURE) -> "MlpNet":
        return cls([np.zeros((fo, fi)) for fi, fo in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(fo) for fo in sizes[1:]])

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpNet":
        return MlpNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _mlp_layers(net: MlpNet, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if i == last else np.maximum(z, 0.0))
    return acts


def mlp_forward(net: MlpNet, f: np.ndarray) -> np.ndarray:
    """Scores for one feature vector (F,) or a batch (N, F)."""
    x = np.asarray(f, dtype=np.float64)
    single = x.ndim == 1
    out = _mlp_layers(net, np.atleast_2d(x))[-1]
    return out[0] if single else out


def mlp_predict(net: MlpNet, features: np.ndarray) -> np.ndarray:
    return np.argmax(mlp_forward(net, np.atleast_2d(features)), axis=1)


def mlp_grads(net: MlpNet, x: np.ndarray, y: np.ndarray, cw: np.ndarray) -> tuple[float, list[np.ndarray]]:
    acts = _mlp_layers(net, x)
    loss, d = weighted_ce(acts[-1], y, cw)
    grads: list[np.ndarray] = []
    for i in range(len(net.weights) - 1, -1, -1):
        grads = [d.T @ acts[i], d.sum(axis=0)] + grads
        if i:
            d = (d @ net.weights[i]) * (acts[i] > 0)
    return loss, grads


@dataclass(frozen=True)
class MlpConfig:
    epochs_max: int = 60
    patience: int = 10
    lr_init: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs_max < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs_max, patience and batch_size must be >= 1")
        if self.lr_init <= 0 or not (0.0 <= self.momentum < 1.0):
            raise ValueError("need lr_init > 0 and momentum in [0, 1)")


@dataclass
class MlpResult:
    net: MlpNet
    report: EvalReport
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0


def mlp_train(net: MlpNet, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
              cfg: MlpConfig = MlpConfig(), test: tuple[np.ndarray, np.ndarray] | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> MlpResult:
    """Momentum SGD on the class-weighted loss with cosine decay and early stopping.

    The report is computed on ``test`` when given, otherwise on ``val``.
    """
    x, y = np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.int64)
    xv, yv = np.asarray(val[0], dtype=np.float64), np.asarray(val[1], dtype=np.int64)
    cw = class_weights(y)
    rng = np.random.default_rng(cfg.seed)
    vel = [np.zeros_like(p) for p in net.params()]
    best, best_acc, best_epoch, stale = net.copy(), -1.0, 0, 0
    history: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs_max):
        lr = cosine_lr(epoch, cfg.epochs_max, cfg.lr_init)
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = mlp_grads(net, x[idx], y[idx], cw)
            total += loss * len(idx)
            for p, g, v in zip(net.params(), grads, vel):
                v *= cfg.momentum
                v -= lr * g
                p += v
        acc = float(np.mean(mlp_predict(net, xv) == yv))
        row = {"epoch": epoch, "lr": lr, "train_loss": total / len(y), "val_acc": acc}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if acc > best_acc:
            best, best_acc, best_epoch, stale = net.copy(), acc, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("mlp early stop at epoch %d", epoch)
                break
    xe, ye = test if test is not None else (xv, yv)
    report = EvalReport.from_predictions(ye, mlp_predict(best, np.asarray(xe)))
    return MlpResult(best, report, history, best_epoch, time.perf_counter() - t0)


# --- operation counts and energy ------------------------------------------------

def count_macs(sizes: Sequence[int]) -> int:
    """Multiply-accumulates per dense inference."""
    return sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))


def snn_dense_bound(sizes: Sequence[int], timesteps: int) -> int:
    """Synaptic events if every neuron spiked at every step."""
    return timesteps * count_macs(sizes)


# Published figures, kept as labelled reference constants.
REFERENCE_ENERGY_J = {"snn": 1551e-15, "lstm": 122.9e-9, "mlp": 8.7e-9}
REFERENCE_ACCURACY = {"snn": 0.8590, "lstm": 0.9906, "mlp": 0.9900}
REFERENCE_PARAMS = {"snn": 9859, "lstm": 138627, "mlp": 9859}
REFERENCE_LSTM_SNN_RATIO = 79267
MLP_MACS = count_macs(ARCHITECTURE)  # 9,664


@dataclass(frozen=True)
class EnergyModel:
    e_synop: float = 0.9e-12  # J per synaptic event
    e_mac: float = REFERENCE_ENERGY_J["mlp"] / MLP_MACS  # J per MAC, ~0.9 pJ
    reference_energies: dict = field(default_factory=lambda: dict(REFERENCE_ENERGY_J))

    def __post_init__(self):
        if not (self.e_synop > 0 and self.e_mac > 0):
            raise ValueError("energy constants must be positive")
        if any(v <= 0 for v in self.reference_energies.values()):
            raise ValueError("reference energies must be positive")

    @classmethod
    def calibrated(cls, synops: float) -> "EnergyModel":
        """Back-solve e_synop so that ``synops`` events cost the published SNN energy."""
        if synops <= 0:
            raise ValueError("calibration needs a positive SynOps count")
        return cls(e_synop=REFERENCE_ENERGY_J["snn"] / synops)


def energy_report(synops: float, macs: float = MLP_MACS, model: EnergyModel = EnergyModel(),
                  timesteps: int = 50, sizes: Sequence[int] = ARCHITECTURE) -> dict:
    """Per-inference energy for the SNN (event driven) and the dense MLP."""
    bound = snn_dense_bound(sizes, timesteps)
    e_snn = synops * model.e_synop
    e_mlp = macs * model.e_mac
    ref = model.reference_energies
    return {
        "measured": {
            "synops_per_inference": float(synops),
            "worst_case_synops": bound,
            "sparsity": float(synops) / bound,
            "mlp_macs": int(macs),
        },
        "constants": {"e_synop_J": model.e_synop, "e_mac_J": model.e_mac},
        "computed": {
            "snn_energy_J": e_snn,
            "mlp_energy_J": e_mlp,
            "mlp_over_snn": e_mlp / e_snn if e_snn > 0 else math.inf,
            "snn_over_mlp": e_snn / e_mlp,
        },
        "published": {
            "energy_J": dict(ref),
            "lstm_over_snn": ref["lstm"] / ref["snn"],
            "lstm_over_snn_stated": REFERENCE_LSTM_SNN_RATIO,
            "mlp_over_snn": ref["mlp"] / ref["snn"],
            "accuracy": dict(REFERENCE_ACCURACY),
            "params": dict(REFERENCE_PARAMS),
        },
    }


def _fmt_j(x: float) -> str:
    for unit, scale in (("nJ", 1e-9), ("pJ", 1e-12), ("fJ", 1e-15)):
        if abs(x) >= scale:
            return f"{x / scale:.4g} {unit}"
    return f"{x:.3g} J"


def energy_table(report: dict) -> str:
    m, c, p = report["measured"], report["computed"], report["published"]
    rows = [
        f"{'model':<6}{'ops/inf':>14}{'energy (computed)':>20}{'energy (published)':>26}",
        f"{'SNN':<6}{m['synops_per_inference']:>14.1f}{_fmt_j(c['snn_energy_J']):>20}"
        f"{_fmt_j(p['energy_J']['snn']):>26}",
        f"{'MLP':<6}{m['mlp_macs']:>14d}{_fmt_j(c['mlp_energy_J']):>20}"
        f"{_fmt_j(p['energy_J']['mlp']):>26}",
        f"{'LSTM':<6}{'-':>14}{'-':>20}{_fmt_j(p['energy_J']['lstm']):>26}",
        "",
        f"sparsity {m['sparsity']:.4%} of {m['worst_case_synops']} worst-case SynOps",
        f"computed MLP/SNN energy ratio {c['mlp_over_snn']:.4g}",
        f"published LSTM/SNN ratio {p['lstm_over_snn']:.0f} (stated {p['lstm_over_snn_stated']})",
        f"e_synop {_fmt_j(report['constants']['e_synop_J'])}, e_mac {_fmt_j(report['constants']['e_mac_J'])}",
    ]
    return "\n".join(rows)


def energy_json(report: dict) -> str:
    return json.dumps(report, indent=2, default=float)
