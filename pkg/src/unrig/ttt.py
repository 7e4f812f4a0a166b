"""Volume-based test-time training for one (character, pose) pair.

Fine-tunes a copy of the pose network for a handful of iterations on
three objectives: pairwise-distance preservation inside each predicted
part (the volume proxy), an edge-length loss on the deformed mesh, and
ground-truth supervision from the driving character's own deformation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, edges, sample_surface, surface_positions
from .nn import AdamState, adam_step, backward, forward
from .pose import PoseCode, PoseNet, assemble_inputs, transfer_pose
from .seeds import rng_for
from .shape import ShapeCode, ShapeDecoder, predict_labels


@dataclass
class TttConfig:
    lambda_v: float = 0.05
    lambda_e: float = 0.01
    lambda_dr: float = 1.0
    iterations: int = 20
    learning_rate: float = 5e-3
    pairs_per_part: int = 256
    surface_samples: int = 2048
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_e, self.lambda_dr) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class PartPair:
    part: int
    x_i: np.ndarray
    x_j: np.ndarray
    index_i: int
    index_j: int


@dataclass
class TttResult:
    net: PoseNet
    mesh: Mesh
    diverged: bool = False
    loss_history: list = None


def sample_pairs(surface, labels: np.ndarray, pairs_per_part: int, seed: int) -> list[PartPair]:
    """Uniform random unordered point pairs within each predicted part.

    Parts with fewer than two sampled points contribute nothing.
    """
    positions = surface_positions(surface) if not isinstance(surface, np.ndarray) else surface
    labels = np.asarray(labels)
    rng = rng_for(seed, "pairs")
    pairs: list[PartPair] = []
    for part in np.unique(labels):
        members = np.flatnonzero(labels == part)
        if len(members) < 2:
            continue
        for _ in range(pairs_per_part):
            i, j = rng.choice(members, size=2, replace=False)
            pairs.append(
                PartPair(part=int(part), x_i=positions[i], x_j=positions[j],
                         index_i=int(i), index_j=int(j))
            )
    return pairs


def loss_volume(pairs: list[PartPair], offsets: np.ndarray) -> float:
    """Sum over pairs of squared change in pairwise Euclidean distance.

    offsets is aligned with the surface point list the pairs were
    sampled from (rows indexed by PartPair.index_*).
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    total = 0.0
    for pair in pairs:
        rest = np.linalg.norm(pair.x_i - pair.x_j)
        deformed = np.linalg.norm(
            (pair.x_i + offsets[pair.index_i]) - (pair.x_j + offsets[pair.index_j])
        )
        total += (rest - deformed) ** 2
    return float(total)


def _volume_loss_and_grad(pairs, positions, offsets):
    """Vectorized volume loss plus gradient with respect to the offsets.

    The distance gradient is zeroed at the deformed-coincident
    singularity (subgradient choice, keeps values finite).
    """
    if not pairs:
        return 0.0, np.zeros_like(offsets)
    ii = np.array([p.index_i for p in pairs])
    jj = np.array([p.index_j for p in pairs])
    rest = np.linalg.norm(positions[ii] - positions[jj], axis=1)
    diff = (positions[ii] + offsets[ii]) - (positions[jj] + offsets[jj])
    deformed = np.linalg.norm(diff, axis=1)
    loss = float(((rest - deformed) ** 2).sum())
    grad = np.zeros_like(offsets)
    safe = deformed > 1e-12
    coeff = np.zeros_like(deformed)
    coeff[safe] = -2.0 * (rest[safe] - deformed[safe]) / deformed[safe]
    contrib = coeff[:, None] * diff
    np.add.at(grad, ii, contrib)
    np.add.at(grad, jj, -contrib)
    return loss, grad


def loss_edge(rest: Mesh, deformed_vertices: np.ndarray) -> float:
    """Mean squared change in edge length over all mesh edges."""
    deformed_vertices = np.asarray(deformed_vertices, dtype=np.float64)
    if deformed_vertices.shape != rest.vertices.shape:
        raise ValueError("deformed vertices must match rest topology")
    e = edges(rest).edges
    rest_len = np.linalg.norm(rest.vertices[e[:, 0]] - rest.vertices[e[:, 1]], axis=1)
    keep = rest_len > 0.0
    if not keep.all():
        warnings.warn(
            f"skipping {int((~keep).sum())} degenerate rest edges in edge loss",
            RuntimeWarning,
            stacklevel=2,
        )
    e = e[keep]
    rest_len = rest_len[keep]
    def_len = np.linalg.norm(deformed_vertices[e[:, 0]] - deformed_vertices[e[:, 1]], axis=1)
    return float(((def_len - rest_len) ** 2).mean())


def _edge_loss_and_grad(rest: Mesh, edge_index: np.ndarray, rest_len: np.ndarray,
                        deformed_vertices: np.ndarray):
    diff = deformed_vertices[edge_index[:, 0]] - deformed_vertices[edge_index[:, 1]]
    def_len = np.linalg.norm(diff, axis=1)
    loss = float(((def_len - rest_len) ** 2).mean())
    grad = np.zeros_like(deformed_vertices)
    safe = def_len > 1e-12
    coeff = np.zeros_like(def_len)
    coeff[safe] = 2.0 * (def_len[safe] - rest_len[safe]) / def_len[safe] / len(rest_len)
    contrib = coeff[:, None] * diff
    np.add.at(grad, edge_index[:, 0], contrib)
    np.add.at(grad, edge_index[:, 1], -contrib)
    return loss, grad


def loss_driving(pred: np.ndarray, truth: np.ndarray) -> float:
    """Sum of squared errors between predicted and ground-truth movement."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if pred.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    return float(((pred - truth) ** 2).sum())


def run_ttt(
    stylized_mesh: Mesh,
    stylized_code: ShapeCode,
    decoder: ShapeDecoder,
    source_mesh: Mesh,
    source_code: ShapeCode,
    driving_dx: np.ndarray,
    m: PoseCode,
    net: PoseNet,
    config: TttConfig,
) -> TttResult:
    """Fine-tune a copy of the pose network for one transfer.

    Volume and edge losses constrain the stylized character's own
    deformation; the driving loss supervises the source character's
    deformation with its ground-truth offsets. The input network is
    never mutated. On divergence the pre-training result is returned
    with the diverged flag set.
    """
    tuned = net.copy()
    baseline = transfer_pose(stylized_mesh, stylized_code, m, net)
    if config.iterations == 0:
        return TttResult(net=tuned, mesh=baseline, loss_history=[])

    pool = sample_surface(stylized_mesh, config.surface_samples, seed=_fold(config.seed, "pool"))
    positions = surface_positions(pool)
    labels = predict_labels(decoder, stylized_code, positions)
    pool_inputs = assemble_inputs(positions, stylized_code.values, m.values)
    vert_inputs = assemble_inputs(stylized_mesh.vertices, stylized_code.values, m.values)
    src_inputs = assemble_inputs(source_mesh.vertices, source_code.values, m.values)
    driving_dx = np.asarray(driving_dx, dtype=np.float64).reshape(-1, 3)
    if len(driving_dx) != len(source_mesh.vertices):
        raise ValueError("driving offsets must align with source vertices")

    edge_index = edges(stylized_mesh).edges
    rest_len = np.linalg.norm(
        stylized_mesh.vertices[edge_index[:, 0]] - stylized_mesh.vertices[edge_index[:, 1]], axis=1
    )
    nonzero = rest_len > 0.0
    edge_index, rest_len = edge_index[nonzero], rest_len[nonzero]

    adam = AdamState.for_params(tuned.m_net.parameters(), config.learning_rate)
    history = []
    for it in range(config.iterations):
        params = tuned.m_net.parameters()
        grads = [np.zeros_like(p) for p in params]
        total = 0.0

        pairs = sample_pairs(positions, labels, config.pairs_per_part, seed=_fold(config.seed, "iter", it))
        off_pool, tape_pool = forward(tuned.m_net, pool_inputs)
        l_v, g_pool = _volume_loss_and_grad(pairs, positions, off_pool)
        total += config.lambda_v * l_v
        if config.lambda_v != 0.0:
            g, _ = backward(tuned.m_net, tape_pool, config.lambda_v * g_pool)
            _acc(grads, g.parameters())

        off_verts, tape_verts = forward(tuned.m_net, vert_inputs)
        l_e, g_verts = _edge_loss_and_grad(
            stylized_mesh, edge_index, rest_len, stylized_mesh.vertices + off_verts
        )
        total += config.lambda_e * l_e
        if config.lambda_e != 0.0:
            g, _ = backward(tuned.m_net, tape_verts, config.lambda_e * g_verts)
            _acc(grads, g.parameters())

        off_src, tape_src = forward(tuned.m_net, src_inputs)
        l_dr = loss_driving(off_src, driving_dx)
        total += config.lambda_dr * l_dr
        if config.lambda_dr != 0.0:
            g, _ = backward(tuned.m_net, tape_src, config.lambda_dr * 2.0 * (off_src - driving_dx))
            _acc(grads, g.parameters())

        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            warnings.warn("test-time training diverged; returning pre-training result", RuntimeWarning)
            return TttResult(net=net.copy(), mesh=baseline, diverged=True, loss_history=history)
        adam_step(params, grads, adam)
        history.append(total)

    return TttResult(
        net=tuned,
        mesh=transfer_pose(stylized_mesh, stylized_code, m, tuned),
        loss_history=history,
    )


def _fold(seed: int, *labels) -> int:
    return int(rng_for(seed, "ttt", *labels).integers(0, 2**31 - 1))


def _acc(into, add):
    for a, b in zip(into, add):
        a += b
