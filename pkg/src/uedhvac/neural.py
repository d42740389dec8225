"""Dense ReLU networks with dropout, manual backprop, Adam and MC-Dropout uncertainty.

Dropout masks multiply hidden activations (equivalently, zero the matching
weight columns).  ``train_scale=True`` applies inverted-dropout scaling
``mask / (1 - p)``; the uncertainty estimator uses raw masked passes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"UEDHVAC\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or does not match the expected manifest."""


@dataclass
class NetworkParams:
    """Layer ``i`` maps ``N_{i-1} -> N_i`` via ``x @ weights[i] + biases[i]``.

    Hidden layers use ReLU followed by the dropout mask; the output layer is
    affine.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input size {w.shape[0]} != previous width {self.weights[i - 1].shape[1]}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def hidden_sizes(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    def arrays(self) -> list[np.ndarray]:
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout)


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(sizes: Sequence[int], dropout: float = 0.0, rng: np.random.Generator | None = None,
                 dtype=np.float32, out_scale: float = 1.0) -> NetworkParams:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        if i == len(sizes) - 2:
            bound *= out_scale
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return NetworkParams(weights, biases, dropout)


def sample_mask(params: NetworkParams, rng: np.random.Generator, batch: int | None = None,
                p: float | None = None) -> list[np.ndarray]:
    """One binary keep-mask per hidden layer, shape ``(width,)`` or ``(batch, width)``."""
    p = params.dropout if p is None else p
    dtype = params.weights[0].dtype
    masks = []
    for width in params.hidden_sizes:
        shape = (width,) if batch is None else (batch, width)
        masks.append((rng.random(shape) >= p).astype(dtype))
    return masks


def _check_input(x: np.ndarray, params: NetworkParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ValueError(f"input size {x.shape[-1]} != network input size {params.weights[0].shape[0]}")
    return x


def _mask_factors(params, mask, train_scale):
    if mask is None:
        return [None] * len(params.hidden_sizes)
    if len(mask) != len(params.hidden_sizes):
        raise ValueError(f"mask has {len(mask)} layers, network has {len(params.hidden_sizes)} hidden layers")
    for m, w in zip(mask, params.hidden_sizes):
        if m.shape[-1] != w:
            raise ValueError(f"mask width {m.shape[-1]} != layer width {w}")
    if train_scale and params.dropout > 0:
        s = 1.0 / (1.0 - params.dropout)
        return [m * np.asarray(s, dtype=m.dtype) for m in mask]
    return list(mask)


def forward_cache(x, params: NetworkParams, mask=None, train_scale: bool = False):
    x = _check_input(x, params)
    factors = _mask_factors(params, mask, train_scale)
    acts = [x]
    pre = []
    h = x
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i < n - 1:
            pre.append(z)
            h = np.maximum(z, 0)
            if factors[i] is not None:
                h = h * factors[i]
            acts.append(h)
        else:
            h = z
    return h, (acts, pre, factors)


def forward(x, params: NetworkParams, mask=None, train_scale: bool = False) -> np.ndarray:
    return forward_cache(x, params, mask, train_scale)[0]


def backward_cache(cache, params: NetworkParams, upstream) -> GradientBundle:
    acts, pre, factors = cache
    delta = np.asarray(upstream, dtype=acts[-1].dtype)
    n = len(params.weights)
    gw = [None] * n
    gb = [None] * n
    batched = acts[0].ndim == 2
    for i in range(n - 1, -1, -1):
        a = acts[i]
        if batched:
            gw[i] = a.T @ delta
            gb[i] = delta.sum(axis=0)
        else:
            gw[i] = np.outer(a, delta)
            gb[i] = delta.copy()
        delta = delta @ params.weights[i].T
        if i > 0:
            if factors[i - 1] is not None:
                delta = delta * factors[i - 1]
            delta = delta * (pre[i - 1] > 0)
    return GradientBundle(gw, gb, delta)


def backward(x, params: NetworkParams, mask=None, upstream=None, train_scale: bool = False) -> GradientBundle:
    """Reverse-mode gradients of ``upstream . f(x)`` w.r.t. every parameter and the input."""
    out, cache = forward_cache(x, params, mask, train_scale)
    if upstream is None:
        upstream = np.ones_like(out)
    upstream = np.asarray(upstream)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {out.shape}")
    return backward_cache(cache, params, upstream)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, **kw)


def adam_direction(grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Advance the moment estimates and return the bias-corrected step direction."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for g, m, v in zip(grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        out.append((m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


def adam_update(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
                lr: float) -> tuple[Sequence[np.ndarray], AdamState]:
    """One Adam descent step, applied in place to ``arrays``."""
    if len(arrays) != len(grads):
        raise ValueError("arrays and grads differ in length")
    for a, d in zip(arrays, adam_direction(grads, state)):
        a -= (lr * d).astype(a.dtype, copy=False)
    return arrays, state


def _pass_outputs(x, params, passes, rng, p):
    x = _check_input(x, params)
    if x.ndim != 1:
        raise ValueError("uncertainty is defined for a single input vector")
    if passes < 1:
        raise ValueError(f"need at least one pass, got {passes}")
    masks = sample_mask(params, rng, batch=passes, p=p)
    xb = np.broadcast_to(x, (passes, x.shape[0]))
    out, cache = forward_cache(xb, params, masks, train_scale=False)
    return out.astype(np.float64), cache


def _biased_variance(f: np.ndarray) -> float:
    # shift by the first pass: identical passes give exactly 0
    d = f - f[0]
    return float(np.mean(np.sum(d * d, axis=1)) - np.sum(np.mean(d, axis=0) ** 2))


def _degenerate(params, passes, p):
    # one pass, or no dropout: every pass is the same network, so the variance is exactly 0
    # (batched BLAS may round identical rows differently, hence the explicit check)
    p = params.dropout if p is None else p
    return passes == 1 or p == 0.0 or not params.hidden_sizes


def mc_uncertainty(x, params: NetworkParams, passes: int, rng: np.random.Generator,
                   p: float | None = None) -> float:
    """MC-Dropout uncertainty: ``mean_c f_c.f_c - mean(f).mean(f)`` over ``passes`` masked passes."""
    f, _ = _pass_outputs(x, params, passes, rng, p)
    if _degenerate(params, passes, p):
        return 0.0
    return max(_biased_variance(f), 0.0)


def mc_uncertainty_grad(x, params: NetworkParams, passes: int, rng: np.random.Generator,
                        p: float | None = None) -> tuple[float, np.ndarray]:
    """Uncertainty and its exact gradient w.r.t. ``x`` through all masked passes."""
    f, cache = _pass_outputs(x, params, passes, rng, p)
    if _degenerate(params, passes, p):
        return 0.0, np.zeros(cache[0][0].shape[1])
    value = max(_biased_variance(f), 0.0)
    upstream = (2.0 / passes) * (f - f.mean(axis=0))
    grads = backward_cache(cache, params, upstream.astype(cache[0][0].dtype))
    return value, grads.inputs.sum(axis=0).astype(np.float64)


# --- checkpoint files -------------------------------------------------------
# layout: magic | u32 header length | JSON header | float32 LE arrays in manifest order


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {}, "arrays": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_arrays(path, expect: dict[str, Sequence[int]] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint file")
    raw = path.read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    try:
        header = json.loads(raw[off:off + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    manifest = header["arrays"]
    if expect is not None:
        got = {a["name"]: tuple(a["shape"]) for a in manifest}
        want = {k: tuple(v) for k, v in expect.items()}
        if got != want:
            raise CheckpointError(f"{path}: manifest mismatch: file has {got}, expected {want}")
    out = {}
    for a in manifest:
        n = int(np.prod(a["shape"], dtype=np.int64))
        end = off + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for array {a['name']}")
        out[a["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(a["shape"]).astype(np.float32)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out, header["meta"]


def network_arrays(params: NetworkParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}W{i}"] = w
        out[f"{prefix}b{i}"] = b
    return out


def network_from_arrays(arrays: dict[str, np.ndarray], dropout: float, prefix: str = "") -> NetworkParams:
    n = sum(1 for k in arrays if k.startswith(f"{prefix}W"))
    return NetworkParams([arrays[f"{prefix}W{i}"] for i in range(n)],
                         [arrays[f"{prefix}b{i}"] for i in range(n)], dropout)


def save_network(path, params: NetworkParams) -> None:
    save_arrays(path, network_arrays(params), {"kind": "network", "sizes": params.sizes,
                                               "dropout": params.dropout})


def load_network(path, like: NetworkParams | None = None) -> NetworkParams:
    expect = None if like is None else {k: v.shape for k, v in network_arrays(like).items()}
    arrays, meta = load_arrays(path, expect)
    if meta.get("kind") != "network":
        raise CheckpointError(f"{path}: not a network checkpoint")
    return network_from_arrays(arrays, float(meta["dropout"]))
