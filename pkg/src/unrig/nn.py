"""Minimal dense-network engine: MLP forward/backward, Adam, checkpoints.

Everything runs in float64. Forward accepts a single vector or a batch
matrix (rows are samples); backward returns parameter gradients summed
over the batch plus the per-sample input gradient, which is how latent
codes receive their updates during auto-decoding.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for

HIDDEN_ACTIVATIONS = ("relu", "softplus")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


class CheckpointError(IOError):
    """Raised on version mismatch, truncation, or checksum failure."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss or gradient goes non-finite."""


@dataclass
class MlpSpec:
    layer_widths: list[int]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("all layer widths must be >= 1")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def parameters(self) -> list[np.ndarray]:
        """Weights then biases, in a fixed order shared with Gradients."""
        return list(self.weights) + list(self.biases)

    def copy(self) -> "Mlp":
        return Mlp(
            spec=MlpSpec(list(self.spec.layer_widths), self.spec.hidden_activation,
                         self.spec.output_activation),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


def init_mlp(spec: MlpSpec, seed: int, zero_last_layer: bool = False) -> Mlp:
    """Kaiming-uniform initialization with an explicit seed.

    With zero_last_layer the final affine map starts at zero, so the
    untrained network is the constant-zero function regardless of input.
    """
    rng = rng_for(seed, "init", *spec.layer_widths)
    weights, biases = [], []
    widths = spec.layer_widths
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, widths[i + 1]))
        b = np.zeros(widths[i + 1])
        weights.append(w)
        biases.append(b)
    if zero_last_layer:
        weights[-1][:] = 0.0
        biases[-1][:] = 0.0
    return Mlp(spec=spec, weights=weights, biases=biases)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Evaluate the network; returns (output, tape) for backward.

    x may be a vector (in_dim,) or a batch (n, in_dim); the output has
    the matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x.reshape(1, -1) if single else x
    if a.shape[1] != net.in_dim:
        raise ValueError(f"input width {a.shape[1]} != expected {net.in_dim}")
    tape = [a]
    n_layers = len(net.weights)
    for i in range(n_layers):
        z = a @ net.weights[i] + net.biases[i]
        if i < n_layers - 1:
            if net.spec.hidden_activation == "relu":
                a = np.maximum(z, 0.0)
            else:  # softplus
                a = np.logaddexp(0.0, z)
            tape.append(z)
            tape.append(a)
        else:
            if net.spec.output_activation == "identity":
                a = z
            elif net.spec.output_activation == "sigmoid":
                a = _sigmoid(z)
            else:
                a = _softmax(z)
            tape.append(z)
            tape.append(a)
    out = a[0] if single else a
    return out, tape


def backward(net: Mlp, tape: list, output_grad: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """Backpropagate d(loss)/d(output) through the tape.

    Returns parameter gradients (summed over the batch) and the gradient
    with respect to the input, shaped like the original input.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    single = g.ndim == 1
    g = g.reshape(1, -1) if single else g
    n_layers = len(net.weights)
    out = tape[-1]
    if g.shape != out.shape:
        raise ValueError(f"output_grad shape {g.shape} != output shape {out.shape}")
    # gradient through the output activation
    if net.spec.output_activation == "sigmoid":
        g = g * out * (1.0 - out)
    elif net.spec.output_activation == "softmax":
        g = out * (g - (g * out).sum(axis=1, keepdims=True))
    grad_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        a_prev = tape[2 * i]
        grad_w[i] = a_prev.T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            z_prev = tape[2 * i - 1]
            if net.spec.hidden_activation == "relu":
                g = g * (z_prev > 0.0)
            else:  # softplus
                g = g * _sigmoid(z_prev)
    input_grad = g[0] if single else g
    return Gradients(weights=grad_w, biases=grad_b), input_grad


@dataclass
class AdamState:
    learning_rate: float
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Standard Adam update with bias correction, applied in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "UNRG", u32 version, u32 entry count; per entry
# u32 name length + UTF-8 name, u32 rank, rank * u64 dims, f64 payload;
# all little-endian, with a trailing CRC32 of every preceding byte.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"UNRG"
CHECKPOINT_VERSION = 1


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    """Write named float64 tensors in the versioned binary format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read tensors written by save_tensors, verifying version and CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", body, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", body, offset)
            offset += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if offset + 8 * size > len(body):
                raise CheckpointError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=offset).copy()
            offset += 8 * size
            tensors[name] = arr.reshape(dims)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing garbage in checkpoint")
    return tensors


_ACT_CODES = {name: float(i) for i, name in enumerate(HIDDEN_ACTIVATIONS)}
_OUT_CODES = {name: float(i) for i, name in enumerate(OUTPUT_ACTIVATIONS)}


def _net_entries(name: str, net: Mlp) -> dict[str, np.ndarray]:
    entries = {
        f"{name}.act": np.array(
            [_ACT_CODES[net.spec.hidden_activation], _OUT_CODES[net.spec.output_activation]]
        )
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        entries[f"{name}.w{i}"] = w
        entries[f"{name}.b{i}"] = b
    return entries


def save_checkpoint(nets: dict[str, Mlp], codes: dict[str, np.ndarray], path) -> None:
    """Persist named networks and named latent vectors together."""
    tensors: dict[str, np.ndarray] = {}
    for name, net in nets.items():
        tensors.update(_net_entries(name, net))
    for name, code in codes.items():
        tensors[f"code.{name}"] = np.asarray(code, dtype=np.float64)
    save_tensors(tensors, path)


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict[str, np.ndarray]]:
    """Inverse of save_checkpoint; round-trips bitwise."""
    tensors = load_tensors(path)
    net_names = sorted({k[: -len(".act")] for k in tensors if k.endswith(".act")})
    nets: dict[str, Mlp] = {}
    for name in net_names:
        act = tensors[f"{name}.act"]
        weights, biases = [], []
        i = 0
        while f"{name}.w{i}" in tensors:
            weights.append(tensors[f"{name}.w{i}"])
            biases.append(tensors[f"{name}.b{i}"])
            i += 1
        widths = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        spec = MlpSpec(
            layer_widths=widths,
            hidden_activation=HIDDEN_ACTIVATIONS[int(act[0])],
            output_activation=OUTPUT_ACTIVATIONS[int(act[1])],
        )
        nets[name] = Mlp(spec=spec, weights=weights, biases=biases)
    codes = {
        k[len("code.") :]: v for k, v in tensors.items() if k.startswith("code.")
    }
    return nets, codes


def finite_difference_gradients(fun, params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of the parameter list.

    The independent oracle for every analytic gradient in this project:
    fun is re-evaluated with one entry nudged at a time, so it never
    shares code with the backward pass it checks.
    """
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            f_plus = fun()
            flat_p[j] = orig - h
            f_minus = fun()
            flat_p[j] = orig
            flat_g[j] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_gradient_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Max relative error between gradient lists, guarded for tiny entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst
