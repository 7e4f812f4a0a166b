"""Implicit pose deformation: per-point offsets conditioned on shape and pose.

One network maps (query point, shape code, pose code) to a 3D offset.
Its final layer starts at zero so an untrained module is the identity
deformation. Training regresses ground-truth offsets from the skinned
synthetic corpus; whole-mesh transfer applies the field to every vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh
from .nn import (
    AdamState,
    Mlp,
    MlpSpec,
    TrainingDiverged,
    adam_step,
    backward,
    forward,
    init_mlp,
)
from .seeds import rng_for
from .shape import ShapeCode

POSE_DIM = 32


@dataclass
class PoseCode:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape != (POSE_DIM,):
            raise ValueError(f"pose code must have dimension {POSE_DIM}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("pose code must be finite")


@dataclass
class PoseNet:
    m_net: Mlp

    @property
    def code_dim(self) -> int:
        return self.m_net.in_dim - 3 - POSE_DIM

    def copy(self) -> "PoseNet":
        return PoseNet(m_net=self.m_net.copy())


@dataclass
class DeformSample:
    """Supervision pair: rest-pose point, ground-truth offset, conditioning."""

    x: np.ndarray
    dx: np.ndarray
    shape_index: int
    pose: PoseCode


@dataclass
class PoseTrainConfig:
    learning_rate: float = 3e-4
    batch: int = 128
    steps: int = 2000
    seed: int = 0
    hidden_activation: str = "relu"


def build_pose_net(code_dim: int, seed: int = 0, hidden_activation: str = "relu",
                   hidden_scale: float = 1.0) -> PoseNet:
    w = max(4, int(256 * hidden_scale))
    spec = MlpSpec(
        [3 + code_dim + POSE_DIM, w, w, w, 3], hidden_activation, "identity"
    )
    net_seed = int(rng_for(seed, "pose_net").integers(0, 2**31 - 1))
    return PoseNet(m_net=init_mlp(spec, seed=net_seed, zero_last_layer=True))


def deform_point(net: PoseNet, x: np.ndarray, s: ShapeCode, m: PoseCode) -> np.ndarray:
    """Predicted offset(s) at point(s) x: M(concat(x, s, m))."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(1, -1) if single else x
    row = np.concatenate([s.values, m.values])
    inp = np.concatenate([pts, np.tile(row, (len(pts), 1))], axis=1)
    out, _ = forward(net.m_net, inp)
    return out[0] if single else out


def loss_deform(pred: np.ndarray, truth: np.ndarray) -> float:
    """Sum of squared offset errors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if pred.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    return float(((pred - truth) ** 2).sum())


def _pose_batch_step(net: PoseNet, inputs: np.ndarray, truth_dx: np.ndarray):
    """Forward/backward for one batch of assembled input rows."""
    pred, tape = forward(net.m_net, inputs)
    loss = loss_deform(pred, truth_dx)
    grads, _ = backward(net.m_net, tape, 2.0 * (pred - truth_dx))
    return loss, grads


def assemble_inputs(x: np.ndarray, s_values: np.ndarray, m_values: np.ndarray) -> np.ndarray:
    """Stack per-row (x, s, m) network inputs; s/m may be single rows."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    s_values = np.asarray(s_values, dtype=np.float64)
    m_values = np.asarray(m_values, dtype=np.float64)
    if s_values.ndim == 1:
        s_values = np.tile(s_values, (n, 1))
    if m_values.ndim == 1:
        m_values = np.tile(m_values, (n, 1))
    return np.concatenate([x, s_values, m_values], axis=1)


def train_pose_module(batches, codes: list[ShapeCode], config: PoseTrainConfig,
                      code_dim: int | None = None) -> tuple[PoseNet, dict]:
    """Adam-train the offset network on a stream of DeformSample batches.

    batches yields lists of DeformSample; shape codes are frozen lookups
    by each sample's shape_index. Stops after config.steps batches or
    when the stream ends.
    """
    if code_dim is None:
        code_dim = len(codes[0].values)
    net = build_pose_net(code_dim, seed=config.seed, hidden_activation=config.hidden_activation)
    adam = AdamState.for_params(net.m_net.parameters(), config.learning_rate)
    history = {"loss": []}
    for step, batch in enumerate(batches):
        if step >= config.steps:
            break
        x = np.stack([b.x for b in batch])
        dx = np.stack([b.dx for b in batch])
        s_rows = np.stack([codes[b.shape_index].values for b in batch])
        m_rows = np.stack([b.pose.values for b in batch])
        inputs = assemble_inputs(x, s_rows, m_rows)
        loss, grads = _pose_batch_step(net, inputs, dx)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"pose training diverged at step {step}: loss={loss}")
        adam_step(net.m_net.parameters(), grads.parameters(), adam)
        history["loss"].append(loss)
    return net, history


def transfer_pose(mesh: Mesh, s: ShapeCode, m: PoseCode, net: PoseNet) -> Mesh:
    """Move every vertex by its predicted offset; topology is untouched."""
    offsets = deform_point(net, mesh.vertices, s, m)
    return Mesh(mesh.vertices + offsets, mesh.faces.copy())


def save_pose_checkpoint(net: PoseNet, path) -> None:
    from .nn import save_checkpoint

    meta = {
        "meta_d": np.array([float(net.code_dim)]),
        "meta_pose_dim": np.array([float(POSE_DIM)]),
    }
    save_checkpoint({"m": net.m_net}, meta, path)


def load_pose_checkpoint(path) -> PoseNet:
    from .nn import load_checkpoint

    nets, _ = load_checkpoint(path)
    return PoseNet(m_net=nets["m"])


def deform_sample_batches(manifest_rows: list[dict], shape_index_of: dict,
                          batch: int, steps: int, seed: int):
    """Deterministic shuffled stream of DeformSample batches from a manifest.

    Loads each (character, pose) pair's rest and target meshes once, and
    treats every surface vertex as one supervision sample per the
    dataset's ground-truth offsets.
    """
    from .mesh import load_obj

    xs, dxs, sidx, pose_idx, pose_codes = [], [], [], [], []
    rest_cache: dict[str, np.ndarray] = {}
    for row in manifest_rows:
        cid = row["character_id"]
        if cid not in shape_index_of:
            continue
        if cid not in rest_cache:
            rest_cache[cid] = load_obj(row["obj_path"]).vertices
        rest = rest_cache[cid]
        target = load_obj(row["target_obj_path"]).vertices
        pose_codes.append(np.asarray(row["pose_code"], dtype=np.float64))
        xs.append(rest)
        dxs.append(target - rest)
        sidx.append(np.full(len(rest), shape_index_of[cid], dtype=np.int64))
        pose_idx.append(np.full(len(rest), len(pose_codes) - 1, dtype=np.int64))
    x = np.concatenate(xs)
    dx = np.concatenate(dxs)
    si = np.concatenate(sidx)
    pi = np.concatenate(pose_idx)
    table = np.stack(pose_codes)
    rng = rng_for(seed, "pose_batches")
    n = len(x)
    order = rng.permutation(n)
    cursor = 0
    for _ in range(steps):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        pick = order[cursor : cursor + batch]
        cursor += batch
        yield [
            DeformSample(x=x[i], dx=dx[i], shape_index=int(si[i]), pose=PoseCode(table[pi[i]]))
            for i in pick
        ]
