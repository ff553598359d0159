"""Surrogate-gradient training of the spiking net and classification metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .snn import (EncoderConfig, SpikingNet, Unrolled, classify_batch, encode_batch,
                  fast_sigmoid_grad, forward_batch, heaviside, unroll)

log = logging.getLogger(__name__)

N_CLASSES = 3
VAL_STREAM = 2**32 - 1  # seed-sequence slot reserved for the validation encoding


class TrainingError(RuntimeError):
    pass


# --- loss -------------------------------------------------------------------

def class_weights(labels: Sequence[int] | np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse-frequency weights N / (C * N_c); every class needs support."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError(f"class with zero support: counts={counts.tolist()}")
    return labels.size / (n_classes * counts)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_ce(scores: np.ndarray, labels: np.ndarray,
                weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean of w_y * cross-entropy(softmax(scores), y) and its gradient w.r.t. scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = scores.shape[0]
    w = np.ones(N_CLASSES) if weights is None else np.asarray(weights, dtype=np.float64)
    ls = _log_softmax(scores)
    wy = w[labels]
    loss = float(np.mean(-wy * ls[np.arange(n), labels]))
    grad = np.exp(ls)
    grad[np.arange(n), labels] -= 1.0
    grad *= (wy / n)[:, None]
    return loss, grad


def loss(scores: Sequence[float], label: int, weights: Sequence[float] | None = None) -> float:
    """Class-weighted cross-entropy of one sample's per-class spike counts."""
    value, _ = weighted_ce(np.asarray(scores, dtype=np.float64)[None, :], np.array([label]),
                           None if weights is None else np.asarray(weights))
    return value


# --- backward pass ----------------------------------------------------------

def bptt(net: SpikingNet, run: Unrolled, d_counts: np.ndarray,
         spike_grad: Callable = fast_sigmoid_grad, detach_reset: bool = True,
         extra_spike_grads: Sequence | None = None,
         extra_potential_grads: Sequence | None = None) -> list[np.ndarray]:
    """Backpropagate d(loss)/d(output counts) through the unrolled network.

    The spike nonlinearity's derivative is replaced by ``spike_grad``. With
    ``detach_reset`` the reset term carries no gradient (the usual choice for
    training; without it the reset path amplifies gradients through time).
    Reset gradients are taken through ``run.reset_spikes`` when present.
    ``extra_spike_grads`` optionally adds, per layer, a gradient w.r.t. that
    layer's spike raster (e.g. from an activity penalty), and
    ``extra_potential_grads`` a gradient w.r.t. its pre-reset potentials.
    Returns gradients aligned with ``net.params()``.
    """
    thr = net.threshold
    L = len(net.weights)
    T = run.inputs.shape[0]
    dtype = net.weights[0].dtype
    dS = np.broadcast_to(np.asarray(d_counts, dtype=dtype), run.spikes[-1].shape)
    grads: list[np.ndarray] = [None] * (2 * L)
    for l in range(L - 1, -1, -1):
        if extra_spike_grads is not None and extra_spike_grads[l] is not None:
            dS = dS + np.asarray(extra_spike_grads[l], dtype=dtype)
        w, beta = net.weights[l], net.betas[l]
        V = run.potentials[l]
        S = run.reset_spikes[l] if run.reset_spikes is not None else run.spikes[l]
        X = run.inputs if l == 0 else run.spikes[l - 1]
        dV = np.empty_like(V)
        dU = np.zeros(V.shape[1:], dtype=dtype)
        dP = None
        if extra_potential_grads is not None and extra_potential_grads[l] is not None:
            dP = np.asarray(extra_potential_grads[l], dtype=dtype)
        for t in range(T - 1, -1, -1):
            v = V[t]
            g = spike_grad(v - thr)
            ds = dS[t]
            if net.reset == "subtract":
                if not detach_reset:
                    ds = ds - thr * dU
                dv = dU + ds * g
            elif net.reset == "zero":
                if not detach_reset:
                    ds = ds - v * dU
                dv = dU * (1.0 - S[t]) + ds * g
            else:
                dv = dU + ds * g
            if dP is not None:
                dv = dv + dP[t]
            dV[t] = dv
            dU = beta * dv
        m = X.shape[-1]
        flat = dV.reshape(-1, dV.shape[-1])
        grads[2 * l] = flat.T @ X.reshape(-1, m)
        grads[2 * l + 1] = flat.sum(axis=0)
        if l:
            dS = dV @ w
    return grads


def loss_and_grads(net: SpikingNet, x: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray | None = None, spike_fn: Callable = heaviside,
                   spike_grad: Callable = fast_sigmoid_grad, detach_reset: bool = True,
                   time_major: bool = False, reset_fn: Callable | None = None
                   ) -> tuple[float, list[np.ndarray], Unrolled]:
    run = unroll(net, x, spike_fn=spike_fn, time_major=time_major, reset_fn=reset_fn)
    value, d_counts = weighted_ce(run.counts, labels, weights)
    return value, bptt(net, run, d_counts, spike_grad, detach_reset), run


# --- optimiser and regularisers ---------------------------------------------

class RMaxProp:
    """Gradient step normalised by a decaying running maximum of g^2."""

    def __init__(self, params: Sequence[np.ndarray], rho: float = 0.9, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.v_max = [np.zeros_like(p) for p in params]
        self.skipped = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> bool:
        """Update ``params`` in place. Non-finite gradients skip the whole step."""
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient, RMaxProp step skipped (%d so far)", self.skipped)
            return False
        for p, g, v in zip(params, grads, self.v_max):
            np.maximum(self.rho * v, g * g, out=v)
            p -= lr * g / np.sqrt(v + self.eps)
        return True


def rmaxprop_step(params, grads, state: RMaxProp, lr: float):
    state.step(params, grads, lr)
    return params, state


def balancing_penalty(net: SpikingNet, lam: float) -> tuple[float, list[np.ndarray]]:
    """lam * sum over hidden neurons of (incoming w^2 - outgoing w^2)^2.

    Returns the penalty and its gradient aligned with ``net.params()``
    (bias gradients are zero).
    """
    grads = [np.zeros_like(p) for p in net.params()]
    total = 0.0
    for l in range(len(net.weights) - 1):
        w_in, w_out = net.weights[l], net.weights[l + 1]
        diff = (w_in ** 2).sum(axis=1) - (w_out ** 2).sum(axis=0)
        total += float(diff @ diff)
        grads[2 * l] += lam * 4.0 * diff[:, None] * w_in
        grads[2 * (l + 1)] -= lam * 4.0 * diff[None, :] * w_out
    return lam * total, grads


def eligibility_traces(spikes: np.ndarray, decay: float) -> np.ndarray:
    """Per-feature low-pass trace of pre-synaptic activity, normalised to mean 1.

    ``spikes`` is (F, T) or (N, F, T). The most recent step has weight 1 and a
    spike ``k`` steps earlier contributes ``decay**k``. A silent batch yields
    all-ones (no modulation).
    """
    s = np.asarray(spikes, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    T = s.shape[-1]
    kernel = decay ** np.arange(T - 1, -1, -1, dtype=np.float64)
    z = np.einsum("nft,t->f", s, kernel)
    mean = z.mean()
    if mean <= 1e-12:
        return np.ones_like(z)
    return z / mean


def eligibility_modulate(grad_w1: np.ndarray, spikes: np.ndarray, decay: float) -> np.ndarray:
    """Scale column i of the first-layer weight gradient by feature i's trace."""
    return grad_w1 * eligibility_traces(spikes, decay)[None, :].astype(grad_w1.dtype)


def cosine_lr(epoch: int, epochs_max: int, lr_init: float) -> float:
    return lr_init * (1.0 + math.cos(math.pi * epoch / epochs_max)) / 2.0


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def rate_penalty(run: Unrolled, lam: float, layers: Sequence[int] = (0,)) -> tuple[float, list[np.ndarray]]:
    """lam * mean spikes per sample in the given layers, with d/d(spikes).

    Returns the penalty and, per layer, the gradient w.r.t. that layer's
    spike raster (broadcastable to its (T, N, n) shape).
    """
    n = run.inputs.shape[1]
    value = 0.0
    d_spikes = [None] * len(run.spikes)
    for l in layers:
        value += lam * float(run.spikes[l].sum()) / n
        d_spikes[l] = lam / n
    return value, d_spikes


def membrane_penalty(run: Unrolled, lam: float, threshold: float = 1.0, margin: float = 0.5,
                     layers: Sequence[int] = (0,)) -> tuple[float, list[np.ndarray | None]]:
    """lam * per-sample sum of relu(V - threshold + margin) over the given layers.

    Unlike ``rate_penalty`` its gradient does not pass through the spike
    surrogate, so it also reaches neurons driven far above threshold.
    Returns the penalty and per-layer gradients w.r.t. the potentials.
    """
    n = run.inputs.shape[1]
    value = 0.0
    d_pot: list[np.ndarray | None] = [None] * len(run.potentials)
    for l in layers:
        excess = run.potentials[l] - (threshold - margin)
        active = excess > 0
        value += lam * float(excess[active].sum()) / n
        d_pot[l] = active.astype(run.potentials[l].dtype) * (lam / n)
    return value, d_pot


# --- fitting ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs_max: int = 200
    patience: int = 15
    lr_init: float = 5e-4
    clip_norm: float = 1.0
    rho: float = 0.9
    balance_lambda: float = 1e-4
    trace_decay: float = 0.9
    batch_size: int = 256
    seed: int = 0
    rate_lambda: float = 0.0
    membrane_lambda: float = 0.0
    membrane_margin: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs_max", "patience", "lr_init", "clip_norm", "rho", "trace_decay",
                     "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.balance_lambda, self.rate_lambda, self.membrane_lambda) < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.patience >= self.epochs_max:
            raise ValueError("patience must be smaller than epochs_max")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class FitResult:
    net: SpikingNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    skipped_steps: int = 0
    seconds: float = 0.0


def _accuracy(net: SpikingNet, x: np.ndarray, y: np.ndarray) -> float:
    counts, _ = forward_batch(net, x)
    return float(np.mean(classify_batch(counts) == y))


def fit(net: SpikingNet, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        cfg: TrainConfig = TrainConfig(), enc: EncoderConfig = EncoderConfig(),
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train ``net`` on (features, labels) pairs with early stopping on validation accuracy.

    Training spikes are re-sampled every epoch from a seed derived from
    ``(cfg.seed, epoch)``; validation spikes use a single fixed encoding.
    The returned net carries the best-epoch weights.
    """
    x_tr, y_tr = np.asarray(train[0]), np.asarray(train[1])
    x_va, y_va = np.asarray(val[0]), np.asarray(val[1])
    if len(x_tr) == 0 or len(x_va) == 0:
        raise TrainingError("training and validation sets must be non-empty")
    started = time.perf_counter()
    dtype = np.dtype(cfg.dtype)
    work = net.astype(dtype)
    params = work.params()
    opt = RMaxProp(params, rho=cfg.rho)
    cw = class_weights(y_tr)
    val_spikes = encode_batch(x_va, enc, np.random.default_rng(epoch_seed(cfg.seed, VAL_STREAM)))
    best = work.copy()
    best_acc, best_epoch, stale = -1.0, -1, 0
    history = []
    for epoch in range(cfg.epochs_max):
        seed = epoch_seed(cfg.seed, epoch)
        rng = np.random.default_rng(seed)
        spikes = encode_batch(x_tr, enc, rng)
        order = rng.permutation(len(x_tr))
        lr = cosine_lr(epoch, cfg.epochs_max, cfg.lr_init)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = spikes[idx]
            run = unroll(work, xb)
            value, d_counts = weighted_ce(run.counts, y_tr[idx], cw)
            r_grads = None
            if cfg.rate_lambda > 0:
                r_val, r_grads = rate_penalty(run, cfg.rate_lambda)
                value += r_val
            p_grads = None
            if cfg.membrane_lambda > 0:
                m_val, p_grads = membrane_penalty(run, cfg.membrane_lambda, work.threshold,
                                                  cfg.membrane_margin)
                value += m_val
            grads = bptt(work, run, d_counts, extra_spike_grads=r_grads,
                         extra_potential_grads=p_grads)
            grads[0] = eligibility_modulate(grads[0], xb, cfg.trace_decay)
            if cfg.balance_lambda > 0:
                pen, pgrads = balancing_penalty(work, cfg.balance_lambda)
                value += pen
                for g, pg in zip(grads, pgrads):
                    g += pg.astype(g.dtype)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            clip_grad_norm(grads, cfg.clip_norm)
            opt.step(params, grads, lr)
            losses.append(value)
        val_acc = _accuracy(work, val_spikes, y_va)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_acc": val_acc, "encode_seed": seed}
        history.append(row)
        log.info("epoch %d lr=%.3g loss=%.4f val_acc=%.4f", epoch, lr, row["train_loss"], val_acc)
        if on_epoch:
            on_epoch(row)
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best = work.copy()
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return FitResult(best.astype(net.weights[0].dtype), history, best_epoch, best_acc,
                     opt.skipped, time.perf_counter() - started)


def fit_gold(gold, conf: dict, on_epoch: Callable[[dict], None] | None = None):
    """Split a Gold set by patient and train a fresh net from a config dict.

    Returns the fit result and the (train, val, test) splits. ``init_gain``
    in ``conf`` scales the initial weights.
    """
    from .dataset import split

    cfg = TrainConfig.from_dict(conf)
    tr, va, te = split(gold, seed=cfg.seed)
    log.info("split %d / %d / %d windows", len(tr), len(va), len(te))
    net = SpikingNet.init(seed=cfg.seed, gain=float(conf.get("init_gain", 1.0)))
    res = fit(net, (tr.features, tr.labels), (va.features, va.labels), cfg, on_epoch=on_epoch)
    return res, (tr, va, te)


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "lr", "train_loss", "val_acc"))
        for row in history:
            w.writerow((row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_acc"])))


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true class, cols: predicted
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int = N_CLASSES) -> "EvalReport":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (y_true, y_pred), 1)
        tp = np.diag(cm).astype(np.float64)
        pred_tot = cm.sum(axis=0)
        support = cm.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(pred_tot > 0, tp / np.maximum(pred_tot, 1), 0.0)
            recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
            denom = precision + recall
            f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
        acc = float(tp.sum() / max(cm.sum(), 1))
        return cls(cm, acc, precision, recall, f1, support)

    @property
    def high_recall(self) -> float:
        """Recall of the HIGH class, the primary safety metric."""
        return float(self.recall[2])

    @property
    def macro(self) -> dict:
        return {"precision": float(self.precision.mean()), "recall": float(self.recall.mean()),
                "f1": float(self.f1.mean())}

    def to_dict(self) -> dict:
        names = ("LOW", "MEDIUM", "HIGH")
        return {
            "accuracy": self.accuracy,
            "high_recall": self.high_recall,
            "per_class": {n: {"precision": float(p), "recall": float(r), "f1": float(f),
                              "support": int(s)}
                          for n, p, r, f, s in zip(names, self.precision, self.recall,
                                                   self.f1, self.support)},
            "macro": self.macro,
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'class':<8}{'prec':>8}{'rec':>8}{'f1':>8}{'supp':>8}"]
        for n, p, r, f, s in zip(("LOW", "MEDIUM", "HIGH"), self.precision, self.recall,
                                 self.f1, self.support):
            lines.append(f"{n:<8}{p:8.4f}{r:8.4f}{f:8.4f}{s:8d}")
        m = self.macro
        lines.append(f"{'macro':<8}{m['precision']:8.4f}{m['recall']:8.4f}{m['f1']:8.4f}"
                     f"{int(self.support.sum()):8d}")
        lines.append(f"accuracy {self.accuracy:.4f}  HIGH recall {self.high_recall:.4f}")
        return "\n".join(lines)


EVAL_SEED = 20240


def predict(net: SpikingNet, features: np.ndarray, enc: EncoderConfig = EncoderConfig(),
            seed: int = EVAL_SEED, n_repeats: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Severity predictions and per-sample SynOps-relevant spike totals.

    With ``n_repeats`` > 1 each window is encoded repeatedly and the
    predictions are combined by majority vote (ties to the higher class).
    """
    votes = np.zeros((len(features), N_CLASSES), dtype=np.int64)
    totals = None
    for r in range(n_repeats):
        spikes = encode_batch(features, enc, np.random.default_rng([seed, r]))
        counts, tot = forward_batch(net, spikes)
        votes[np.arange(len(features)), classify_batch(counts)] += 1
        totals = tot if totals is None else totals + tot
    return classify_batch(votes), totals / n_repeats


def evaluate(net: SpikingNet, features: np.ndarray, labels: np.ndarray,
             enc: EncoderConfig = EncoderConfig(), seed: int = EVAL_SEED,
             n_repeats: int = 1) -> EvalReport:
    pred, _ = predict(net, features, enc, seed, n_repeats)
    return EvalReport.from_predictions(labels, pred)
