"""Poisson rate encoding and the three-layer LIF severity network."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOW, MEDIUM, HIGH = 0, 1, 2
SEVERITY_NAMES = ("LOW", "MEDIUM", "HIGH")
ARCHITECTURE = (10, 128, 64, 3)
DEFAULT_BETAS = (0.95, 0.90, 0.80)
SURROGATE_SLOPE = 25.0


@dataclass(frozen=True)
class EncoderConfig:
    timesteps: int = 50
    noise_sigma: float = 0.05
    axonal_delay: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not (0.0 <= self.noise_sigma <= 1.0):
            raise ValueError("noise_sigma must lie in [0, 1]")
        if not (0 <= self.axonal_delay < self.timesteps):
            raise ValueError("axonal_delay must lie in [0, timesteps)")


def encode_batch(features: np.ndarray, cfg: EncoderConfig = EncoderConfig(),
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Bernoulli spike trains for a batch of rate vectors.

    ``features`` has shape (N, F) with entries in [0, 1]; the result is a
    uint8 array of shape (N, F, T) whose first ``axonal_delay`` steps are
    silent. Rate noise is drawn independently for every (sample, feature, step).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be 2-D (N, F)")
    if not np.all(np.isfinite(f)) or f.min(initial=0.0) < 0.0 or f.max(initial=0.0) > 1.0:
        raise ValueError("features must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n, nf = f.shape
    steps = cfg.timesteps - cfg.axonal_delay
    p = np.broadcast_to(f[:, :, None], (n, nf, steps))
    if cfg.noise_sigma > 0:
        p = np.clip(p + rng.normal(0.0, cfg.noise_sigma, size=(n, nf, steps)), 0.0, 1.0)
    out = np.zeros((n, nf, cfg.timesteps), dtype=np.uint8)
    out[:, :, cfg.axonal_delay:] = rng.random((n, nf, steps)) < p
    return out


def poisson_encode(features: Sequence[float] | np.ndarray, cfg: EncoderConfig = EncoderConfig(),
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Encode one feature vector into a (F, T) binary spike tensor."""
    return encode_batch(np.asarray(features, dtype=np.float64)[None, :], cfg, rng)[0]


def lif_step(v: np.ndarray, current: np.ndarray, beta: float, threshold: float = 1.0,
             reset: str = "subtract") -> tuple[np.ndarray, np.ndarray]:
    """One leaky integrate-and-fire update; returns (post-reset potential, spikes)."""
    v_new = beta * np.asarray(v, dtype=np.float64) + current
    spikes = v_new >= threshold
    if reset == "subtract":
        v_out = v_new - threshold * spikes
    elif reset == "zero":
        v_out = np.where(spikes, 0.0, v_new)
    else:
        raise ValueError(f"unknown reset mechanism {reset!r}")
    return v_out, spikes.astype(np.uint8)


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def fast_sigmoid_grad(x, slope: float = SURROGATE_SLOPE):
    """Surrogate derivative of the Heaviside spike: s / (1 + |s x|)^2."""
    x = _as_float(x)
    return x.dtype.type(slope) / (1 + np.abs(x.dtype.type(slope) * x)) ** 2


def fast_sigmoid(x, slope: float = SURROGATE_SLOPE):
    """Smooth spike relaxation whose derivative is exactly ``fast_sigmoid_grad``.

    Ranges over (-0.5, 1.5) and equals 0.5 at threshold. Only used for
    gradient checks on the rate-relaxed network.
    """
    sx = slope * _as_float(x)
    return 0.5 + sx / (1.0 + np.abs(sx))


def heaviside(x):
    x = _as_float(x)
    return (x >= 0).astype(x.dtype)


@dataclass
class SpikingNet:
    """Feed-forward LIF network; ``weights[l]`` has shape (fan_out, fan_in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    betas: tuple[float, ...] = DEFAULT_BETAS
    threshold: float = 1.0
    reset: str = "subtract"

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.betas)):
            raise ValueError("weights, biases and betas must have one entry per layer")
        if any(not (0.0 <= b <= 1.0) for b in self.betas):
            raise ValueError("betas must lie in [0, 1]")
        if any(a <= b for a, b in zip(self.betas, self.betas[1:])):
            raise ValueError("betas must strictly decrease with depth")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} != ({w.shape[0]},)")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: fan-in does not match previous layer")

    @classmethod
    def init(cls, sizes: Sequence[int] = ARCHITECTURE, betas: Sequence[float] = DEFAULT_BETAS,
             seed: int = 0, gain: float = 1.0, dtype=np.float64, **kw) -> "SpikingNet":
        """Uniform(+-gain/sqrt(fan_in)) initialisation, as for dense linear layers."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = gain / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype))
            bs.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        return cls(ws, bs, tuple(betas), **kw)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Flat parameter list [w1, b1, w2, b2, ...] sharing memory with the net."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "SpikingNet":
        return SpikingNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          tuple(self.betas), self.threshold, self.reset)

    def astype(self, dtype) -> "SpikingNet":
        return SpikingNet([w.astype(dtype) for w in self.weights],
                          [b.astype(dtype) for b in self.biases],
                          tuple(self.betas), self.threshold, self.reset)


@dataclass
class Unrolled:
    """Recorded activity of one batched forward pass (time-major arrays)."""

    inputs: np.ndarray            # (T, N, F)
    potentials: list[np.ndarray]  # per layer (T, N, n), pre-reset
    spikes: list[np.ndarray]      # per layer (T, N, n)
    reset_spikes: list[np.ndarray] | None = None  # only when reset_fn differs from spike_fn

    @property
    def counts(self) -> np.ndarray:
        return self.spikes[-1].sum(axis=0)

    def layer_totals(self) -> np.ndarray:
        """Per-sample spike totals: input, then each layer. Shape (N, L + 1)."""
        cols = [self.inputs.sum(axis=(0, 2))] + [s.sum(axis=(0, 2)) for s in self.spikes]
        return np.stack(cols, axis=1)


def unroll(net: SpikingNet, x: np.ndarray, spike_fn: Callable = heaviside,
           time_major: bool = False, reset_fn: Callable | None = None) -> Unrolled:
    """Simulate the network over all timesteps.

    ``x`` is (N, F, T) (or (T, N, F) with ``time_major``). Layers are
    evaluated one after another over the full time axis, which is exact for
    a feed-forward net and lets each layer's input projection be one matmul.
    States start at zero. ``reset_fn`` optionally decides resets separately
    from the transmitted spike value (used by the rate-relaxed model).
    """
    dtype = net.weights[0].dtype
    s = np.asarray(x)
    if not time_major:
        if s.ndim != 3 or s.shape[1] != net.sizes[0]:
            raise ValueError(f"expected input of shape (N, {net.sizes[0]}, T), got {s.shape}")
        s = s.transpose(2, 0, 1)
    elif s.ndim != 3 or s.shape[2] != net.sizes[0]:
        raise ValueError(f"expected time-major input (T, N, {net.sizes[0]}), got {s.shape}")
    s = np.ascontiguousarray(s, dtype=dtype)
    inputs = s
    thr = net.threshold
    potentials, spikes, resets = [], [], []
    for w, b, beta in zip(net.weights, net.biases, net.betas):
        cur = s @ w.T + b
        T, n, m = cur.shape
        V = np.empty_like(cur)
        S = np.empty_like(cur)
        R = np.empty_like(cur) if reset_fn is not None else S
        u = np.zeros((n, m), dtype=dtype)
        for t in range(T):
            v = beta * u + cur[t]
            S[t] = spike_fn(v - thr)
            if reset_fn is not None:
                R[t] = reset_fn(v - thr)
            V[t] = v
            if net.reset == "subtract":
                u = v - thr * R[t]
            elif net.reset == "zero":
                u = v * (1.0 - R[t])
            else:
                u = v
        potentials.append(V)
        spikes.append(S)
        resets.append(R)
        s = S
    return Unrolled(inputs, potentials, spikes, resets if reset_fn is not None else None)


@dataclass(frozen=True)
class ForwardResult:
    counts: np.ndarray          # (3,) output spike counts
    layer_totals: np.ndarray    # spikes emitted by input and each layer

    @property
    def severity(self) -> int:
        return classify(self.counts)


def forward(net: SpikingNet, x: np.ndarray) -> ForwardResult:
    """Run one (F, T) spike tensor through the net."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a (F, T) spike tensor, got shape {x.shape}")
    run = unroll(net, x[None])
    return ForwardResult(run.counts[0].astype(np.int64), run.layer_totals()[0].astype(np.int64))


def forward_batch(net: SpikingNet, x: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Counts (N, C) and layer totals (N, L + 1) for a (N, F, T) batch."""
    counts, totals = [], []
    for i in range(0, len(x), chunk):
        run = unroll(net, x[i:i + chunk])
        counts.append(run.counts)
        totals.append(run.layer_totals())
    return (np.concatenate(counts).astype(np.int64), np.concatenate(totals).astype(np.int64))


def classify(counts: Sequence[float] | np.ndarray) -> int:
    """Spike-count argmax; ties go to the higher severity."""
    c = np.asarray(counts)
    return int(len(c) - 1 - np.argmax(c[::-1]))


def classify_batch(counts: np.ndarray) -> np.ndarray:
    c = np.asarray(counts)
    return c.shape[1] - 1 - np.argmax(c[:, ::-1], axis=1)


def count_synops(net: SpikingNet, layer_totals: Sequence[float]) -> int:
    """Synaptic events: spikes entering each weight matrix times its fan-out.

    ``layer_totals`` lists spikes from the input, then from each hidden layer;
    any trailing output-layer total is ignored because it drives no synapses.
    """
    return int(sum(int(layer_totals[l]) * w.shape[0] for l, w in enumerate(net.weights)))


def synops_upper_bound(net: SpikingNet, timesteps: int) -> int:
    return timesteps * sum(w.size for w in net.weights)


# Weight file: "PDDS", u32 version, 3 x (u32 rows, u32 cols, f32 row-major,
# u32 bias len, f32 bias), 3 x f64 betas. Little-endian throughout.
MAGIC = b"PDDS"
FORMAT_VERSION = 1


def save_weights(net: SpikingNet, path: str | Path, meta: dict | None = None) -> None:
    if len(net.weights) != 3:
        raise ValueError("weight file format holds exactly three layers")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for w, b in zip(net.weights, net.biases):
            fh.write(struct.pack("<II", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", b.size))
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        fh.write(struct.pack("<3d", *net.betas))
    sidecar = {"threshold": net.threshold, "reset": net.reset}
    sidecar.update(meta or {})
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_weights(path: str | Path, dtype=np.float64) -> tuple[SpikingNet, dict]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a PDDS weight file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 8
    ws, bs = [], []
    for _ in range(3):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        ws.append(np.frombuffer(buf, "<f4", rows * cols, off).reshape(rows, cols).astype(dtype))
        off += 4 * rows * cols
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        bs.append(np.frombuffer(buf, "<f4", n, off).astype(dtype))
        off += 4 * n
    betas = struct.unpack_from("<3d", buf, off)
    off += 24
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    net = SpikingNet(ws, bs, tuple(betas), float(meta.get("threshold", 1.0)),
                     meta.get("reset", "subtract"))
    return net, meta


def encoder_from_meta(meta: dict, **overrides) -> EncoderConfig:
    fields_ = {k: meta[k] for k in ("timesteps", "noise_sigma", "axonal_delay", "seed") if k in meta}
    fields_.update(overrides)
    return EncoderConfig(**fields_)
