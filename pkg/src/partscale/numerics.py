"""Dense MLPs with manual backprop, an Adam optimizer, positional encodings,
and a binary checkpoint format.

Parameters are float32; losses and gradient accumulation run in float64 so
reductions are reproducible. Feeding float64 inputs to `Mlp.forward` runs the
whole pass in float64 (used by the finite-difference gradient check).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class Mlp:
    """Fully-connected net, ReLU on hidden layers, identity output."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights/biases mismatch")
        for i in range(len(weights) - 1):
            if weights[i].shape[1] != weights[i + 1].shape[0]:
                raise ValueError("incompatible consecutive layer shapes")
        for w, b in zip(weights, biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias shape mismatch")
        self.weights = weights
        self.biases = biases

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Run the net on a (B, in) batch; optionally return the activation cache
        needed by backward. Dtype follows the input (float32 or float64)."""
        x = np.ascontiguousarray(x)
        acts = [x]
        pre = []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < n - 1 else z
            acts.append(h)
        if want_cache:
            return h, (acts, pre)
        return h

    def backward(self, cache, out_grad: np.ndarray):
        """Chain-rule gradients for the cached forward pass.

        Returns (param_grads aligned with parameters(), input_grad), with all
        accumulation in float64.
        """
        acts, pre = cache
        g = np.asarray(out_grad, dtype=np.float64)
        n = len(self.weights)
        w_grads: list[np.ndarray] = [None] * n
        b_grads: list[np.ndarray] = [None] * n
        for i in range(n - 1, -1, -1):
            a_in = acts[i]
            w_grads[i] = a_in.astype(np.float64).T @ g
            b_grads[i] = g.sum(axis=0)
            g = g @ self.weights[i].astype(np.float64).T
            if i > 0:
                g = g * (pre[i - 1] > 0.0)
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.extend([wg, bg])
        return grads, g


def mlp_init(widths: list[int], seed: int) -> Mlp:
    """He-normal weights (std = sqrt(2/fan_in)), zero biases, deterministic per seed."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    if any(w <= 0 for w in widths):
        raise ValueError("zero or negative layer width")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append((rng.normal(0.0, std, size=(fan_in, fan_out))).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return Mlp(weights, biases)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    params: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list length mismatch")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosEnc:
    n_frequencies: int
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.n_frequencies + int(self.include_input))


def posenc(x: np.ndarray, cfg: PosEnc) -> np.ndarray:
    """Sinusoidal encoding, per-component layout:
    [x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)].
    """
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    L = cfg.n_frequencies
    parts_per = 2 * L + int(cfg.include_input)
    out = np.empty(x.shape + (parts_per,), dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    col = 0
    if cfg.include_input:
        out[..., 0] = x
        col = 1
    for k in range(L):
        arg = (np.pi * (2.0 ** k)) * x
        out[..., col] = np.sin(arg)
        out[..., col + 1] = np.cos(arg)
        col += 2
    return out.reshape(x.shape[:-1] + (x.shape[-1] * parts_per,))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SP3DCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors: magic, version, count, then per tensor
    name length + UTF-8 name, rank, dims (u32), little-endian f32 data."""
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor name")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    off = 8
    try:
        version, count = struct.unpack_from("<II", data, off)
        off += 8
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            if len(data) < off + nlen:
                raise CheckpointError("truncated name")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from("<" + "I" * rank, data, off)
            off += 4 * rank
            numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 4 * numel
            if len(data) < off + nbytes:
                raise CheckpointError("truncated tensor data")
            arr = np.frombuffer(data[off:off + nbytes], dtype="<f4").reshape(dims).copy()
            off += nbytes
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = arr
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    return out


def mlp_to_tensors(prefix: str, mlp: Mlp) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in tensors:
        weights.append(np.array(tensors[f"{prefix}.w{i}"], dtype=np.float32))
        biases.append(np.array(tensors[f"{prefix}.b{i}"], dtype=np.float32))
        i += 1
    if not weights:
        raise CheckpointError(f"no tensors under prefix {prefix!r}")
    return Mlp(weights, biases)
