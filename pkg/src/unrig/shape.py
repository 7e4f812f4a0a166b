"""Correspondence-aware shape module: auto-decoder over latent shape codes.

A query point and a shape code pass through an embedding network; three
heads predict occupancy, a part-segmentation distribution, and (from
the code and embedding together) the query point itself. The inverse
head is the self-supervised constraint that keeps embeddings spatially
distinctive for characters without part annotations. Training jointly
optimizes the decoder and one code per character; unseen characters get
a code by optimizing against the frozen decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, sample_queries, sample_surface, surface_positions
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

CLAMP = 1e-7


@dataclass
class ShapeCode:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("shape code must be finite")


@dataclass
class ShapeDecoder:
    f_net: Mlp
    o_net: Mlp
    p_net: Mlp
    q_net: Mlp
    part_count: int

    @property
    def code_dim(self) -> int:
        return self.f_net.in_dim - 3

    def networks(self) -> dict[str, Mlp]:
        return {"f": self.f_net, "o": self.o_net, "p": self.p_net, "q": self.q_net}

    def parameters(self) -> list[np.ndarray]:
        out = []
        for net in self.networks().values():
            out += net.parameters()
        return out


@dataclass
class ShapeTrainItem:
    """One training character: mesh plus optional per-vertex part labels."""

    mesh: Mesh
    code_index: int
    vertex_labels: np.ndarray | None = None
    labeled: bool = False

    def __post_init__(self):
        if self.labeled and self.vertex_labels is None:
            raise ValueError("labeled items need vertex labels")


@dataclass
class ShapeTrainConfig:
    code_dim: int = 128
    part_count: int = 16
    learning_rate: float = 1e-4
    steps: int = 2000
    batch: int = 64
    query_pool: int = 10000
    surface_pool: int = 4096
    sigma: float = 0.05
    code_init_std: float = 0.01
    seed: int = 0
    hidden_activation: str = "relu"


@dataclass
class ShapeFitConfig:
    iterations: int = 2000
    batch: int = 2000
    query_pool: int = 10000
    learning_rate: float = 1e-4
    sigma: float = 0.05
    code_init_std: float = 0.01
    seed: int = 0


def build_decoder(config: ShapeTrainConfig, hidden_scale: float = 1.0) -> ShapeDecoder:
    """Fresh decoder networks; hidden_scale shrinks widths for test rigs."""
    d, k = config.code_dim, config.part_count
    act = config.hidden_activation
    w256 = max(4, int(256 * hidden_scale))
    w128 = max(4, int(128 * hidden_scale))
    f_net = init_mlp(MlpSpec([3 + d, w256, w256, d], act, "identity"), seed=_net_seed(config.seed, "f"))
    o_net = init_mlp(MlpSpec([d, w128, 1], act, "sigmoid"), seed=_net_seed(config.seed, "o"))
    p_net = init_mlp(MlpSpec([d, w128, k], act, "softmax"), seed=_net_seed(config.seed, "p"))
    q_net = init_mlp(MlpSpec([2 * d, w256, 3], act, "identity"), seed=_net_seed(config.seed, "q"))
    return ShapeDecoder(f_net=f_net, o_net=o_net, p_net=p_net, q_net=q_net, part_count=k)


def _net_seed(seed: int, name: str) -> int:
    return int(rng_for(seed, "shape_net", name).integers(0, 2**31 - 1))


# -- heads -------------------------------------------------------------------


def embed(decoder: ShapeDecoder, x: np.ndarray, s: ShapeCode) -> np.ndarray:
    """Embedding of query point(s) under a shape code: F(concat(x, s))."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(1, -1) if single else x
    fin = np.concatenate([pts, np.tile(s.values, (len(pts), 1))], axis=1)
    e, _ = forward(decoder.f_net, fin)
    return e[0] if single else e


def predict_occupancy(decoder: ShapeDecoder, e: np.ndarray) -> np.ndarray:
    """Occupancy probability in (0,1) from an embedding (or batch)."""
    out, _ = forward(decoder.o_net, e)
    return out[..., 0] if out.ndim > 1 else out[0]


def predict_parts(decoder: ShapeDecoder, e: np.ndarray) -> np.ndarray:
    """Part probability vector(s) of length part_count; rows sum to 1."""
    out, _ = forward(decoder.p_net, e)
    return out


def invert(decoder: ShapeDecoder, s: ShapeCode, e: np.ndarray) -> np.ndarray:
    """Reconstructed query point(s) from code and embedding: Q(s, e)."""
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    emb = e.reshape(1, -1) if single else e
    qin = np.concatenate([np.tile(s.values, (len(emb), 1)), emb], axis=1)
    out, _ = forward(decoder.q_net, qin)
    return out[0] if single else out


# -- losses (sums, exactly as trained) ---------------------------------------


def loss_occupancy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Summed binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    return float(-(truth * np.log(p) + (1.0 - truth) * np.log(1.0 - p)).sum())


def _grad_loss_occupancy(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    g = (p - truth) / (p * (1.0 - p))
    g[(pred < CLAMP) | (pred > 1.0 - CLAMP)] = 0.0  # clamp is flat outside
    return g


def loss_part(pred: np.ndarray, truth: np.ndarray) -> float:
    """Summed negative log-likelihood of the true part per point."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if len(pred) != len(truth):
        raise ValueError("prediction/truth length mismatch")
    if truth.size and (truth.min() < 0 or truth.max() >= pred.shape[1]):
        raise ValueError("part index out of range")
    p = np.clip(pred[np.arange(len(truth)), truth], CLAMP, 1.0)
    return float(-np.log(p).sum())


def _grad_loss_part(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    g = np.zeros_like(pred)
    rows = np.arange(len(truth))
    p = np.clip(pred[rows, truth], CLAMP, 1.0)
    g[rows, truth] = -1.0 / p
    g[rows[pred[rows, truth] < CLAMP], truth[pred[rows, truth] < CLAMP]] = 0.0
    return g


def loss_inverse(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Sum of squared reconstruction errors of the inverse head."""
    x_hat = np.asarray(x_hat, dtype=np.float64).reshape(-1, 3)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if x_hat.shape != x.shape:
        raise ValueError("prediction/truth length mismatch")
    return float(((x_hat - x) ** 2).sum())


# -- fused forward/backward for one (item, batch) step -----------------------


@dataclass
class _StepResult:
    loss_o: float = 0.0
    loss_p: float = 0.0
    loss_q: float = 0.0
    net_grads: dict = field(default_factory=dict)
    code_grad: np.ndarray | None = None

    @property
    def total(self) -> float:
        return self.loss_o + self.loss_p + self.loss_q


def _shape_step(
    decoder: ShapeDecoder,
    code: np.ndarray,
    query_x: np.ndarray,
    query_o: np.ndarray,
    surface_x: np.ndarray | None = None,
    surface_labels: np.ndarray | None = None,
    use_inverse: bool = True,
) -> _StepResult:
    """Losses and gradients for one character batch.

    Occupancy and inverse losses run on the query points; the part loss
    runs on the surface points when labels are given. Gradients flow to
    all four networks and to the code.
    """
    d = decoder.code_dim
    res = _StepResult()
    code_grad = np.zeros(d)
    zero_like = lambda net: [np.zeros_like(p) for p in net.parameters()]
    grads = {name: zero_like(net) for name, net in decoder.networks().items()}

    s_tile = np.tile(code, (len(query_x), 1))
    fin = np.concatenate([query_x, s_tile], axis=1)
    e, tape_f = forward(decoder.f_net, fin)

    o_hat, tape_o = forward(decoder.o_net, e)
    res.loss_o = loss_occupancy(o_hat[:, 0], query_o)
    d_ohat = _grad_loss_occupancy(o_hat[:, 0], query_o)[:, None]
    g_o, d_e_from_o = backward(decoder.o_net, tape_o, d_ohat)
    _acc(grads["o"], g_o.parameters())

    d_e = d_e_from_o
    if use_inverse:
        qin = np.concatenate([s_tile, e], axis=1)
        x_hat, tape_q = forward(decoder.q_net, qin)
        res.loss_q = loss_inverse(x_hat, query_x)
        d_xhat = 2.0 * (x_hat - query_x)
        g_q, d_qin = backward(decoder.q_net, tape_q, d_xhat)
        _acc(grads["q"], g_q.parameters())
        code_grad += d_qin[:, :d].sum(axis=0)
        d_e = d_e + d_qin[:, d:]

    g_f, d_fin = backward(decoder.f_net, tape_f, d_e)
    _acc(grads["f"], g_f.parameters())
    code_grad += d_fin[:, 3:].sum(axis=0)

    if surface_x is not None and surface_labels is not None and len(surface_x):
        s_tile2 = np.tile(code, (len(surface_x), 1))
        fin2 = np.concatenate([surface_x, s_tile2], axis=1)
        e2, tape_f2 = forward(decoder.f_net, fin2)
        p_hat, tape_p = forward(decoder.p_net, e2)
        res.loss_p = loss_part(p_hat, surface_labels)
        d_p = _grad_loss_part(p_hat, surface_labels)
        g_p, d_e2 = backward(decoder.p_net, tape_p, d_p)
        _acc(grads["p"], g_p.parameters())
        g_f2, d_fin2 = backward(decoder.f_net, tape_f2, d_e2)
        _acc(grads["f"], g_f2.parameters())
        code_grad += d_fin2[:, 3:].sum(axis=0)

    res.net_grads = grads
    res.code_grad = code_grad
    return res


def _acc(into: list[np.ndarray], add: list[np.ndarray]) -> None:
    for a, b in zip(into, add):
        a += b


def surface_sample_labels(mesh: Mesh, vertex_labels: np.ndarray, samples) -> np.ndarray:
    """Label of the dominant (max-barycentric) vertex per surface sample."""
    face_idx = np.array([sp.face_index for sp in samples], dtype=np.int64)
    bary = np.stack([sp.barycentric for sp in samples])
    corner = bary.argmax(axis=1)
    verts = mesh.faces[face_idx, corner]
    return np.asarray(vertex_labels, dtype=np.int64)[verts]


class _ItemPools:
    """Per-item query/surface pools, reshuffled and resampled per epoch."""

    def __init__(self, item: ShapeTrainItem, config: ShapeTrainConfig):
        self.item = item
        self.config = config
        self.epoch = 0
        self.q_cursor = 0
        self.s_cursor = 0
        self._fill()

    def _fill(self):
        cfg = self.config
        seed = int(rng_for(cfg.seed, "pool", self.item.code_index, self.epoch).integers(0, 2**31 - 1))
        queries = sample_queries(self.item.mesh, cfg.query_pool, cfg.sigma, seed)
        self.qx = np.stack([q.position for q in queries])
        self.qo = np.array([q.occupancy for q in queries], dtype=np.float64)
        if self.item.labeled:
            surf = sample_surface(self.item.mesh, cfg.surface_pool, seed)
            self.sx = surface_positions(surf)
            self.sl = surface_sample_labels(self.item.mesh, self.item.vertex_labels, surf)
        else:
            self.sx = None
            self.sl = None

    def query_batch(self, n: int):
        if self.q_cursor + n > len(self.qx):
            self.epoch += 1
            self.q_cursor = 0
            self.s_cursor = 0
            self._fill()
        sl = slice(self.q_cursor, self.q_cursor + n)
        self.q_cursor += n
        return self.qx[sl], self.qo[sl]

    def surface_batch(self, n: int):
        if self.sx is None:
            return None, None
        if self.s_cursor + n > len(self.sx):
            self.s_cursor = 0
        sl = slice(self.s_cursor, self.s_cursor + n)
        self.s_cursor += n
        return self.sx[sl], self.sl[sl]


def train_shape_module(
    items: list[ShapeTrainItem], config: ShapeTrainConfig
) -> tuple[ShapeDecoder, list[ShapeCode], dict]:
    """Jointly optimize the decoder and one code per item with Adam.

    Items are visited round-robin, one per step, on batches of
    config.batch points. Part loss applies only to labeled items.
    Returns (decoder, codes, history with per-step losses and final
    occupancy accuracy per item).
    """
    if not any(item.labeled for item in items):
        raise ValueError("need at least one labeled item")
    decoder = build_decoder(config)
    rng = rng_for(config.seed, "codes")
    codes = [rng.normal(0.0, config.code_init_std, size=config.code_dim) for _ in items]
    decoder_adam = AdamState.for_params(decoder.parameters(), config.learning_rate)
    code_adams = [AdamState.for_params([c], config.learning_rate) for c in codes]
    pools = [_ItemPools(item, config) for item in items]
    history = {"loss_o": [], "loss_p": [], "loss_q": [], "total": []}
    for step in range(config.steps):
        idx = step % len(items)
        qx, qo = pools[idx].query_batch(config.batch)
        sx, slab = pools[idx].surface_batch(config.batch)
        res = _shape_step(decoder, codes[idx], qx, qo, sx, slab)
        if not np.isfinite(res.total):
            raise TrainingDiverged(
                f"shape training diverged at step {step} (item {idx}): loss={res.total}"
            )
        flat_grads = []
        for name in decoder.networks():
            flat_grads += res.net_grads[name]
        adam_step(decoder.parameters(), flat_grads, decoder_adam)
        adam_step([codes[idx]], [res.code_grad], code_adams[idx])
        history["loss_o"].append(res.loss_o)
        history["loss_p"].append(res.loss_p)
        history["loss_q"].append(res.loss_q)
        history["total"].append(res.total)
    history["occupancy_accuracy"] = [
        _occupancy_accuracy(decoder, codes[i], items[i], config) for i in range(len(items))
    ]
    return decoder, [ShapeCode(c) for c in codes], history


def _occupancy_accuracy(decoder, code, item, config, n: int = 2000) -> float:
    seed = int(rng_for(config.seed, "acc", item.code_index).integers(0, 2**31 - 1))
    queries = sample_queries(item.mesh, n, config.sigma, seed)
    qx = np.stack([q.position for q in queries])
    qo = np.array([q.occupancy for q in queries])
    e = embed(decoder, qx, ShapeCode(code) if not isinstance(code, ShapeCode) else code)
    pred = predict_occupancy(decoder, e) >= 0.5
    return float((pred == qo.astype(bool)).mean())


def fit_shape_code(mesh: Mesh, decoder: ShapeDecoder, config: ShapeFitConfig) -> ShapeCode:
    """Optimize a fresh code against the frozen decoder.

    A fixed pool of query points is sampled once; each iteration draws a
    batch from it and minimizes occupancy plus inverse loss with respect
    to the code only.
    """
    rng = rng_for(config.seed, "fit_code")
    code = rng.normal(0.0, config.code_init_std, size=decoder.code_dim)
    if config.iterations == 0:
        return ShapeCode(code)
    pool_seed = int(rng_for(config.seed, "fit_pool").integers(0, 2**31 - 1))
    queries = sample_queries(mesh, config.query_pool, config.sigma, pool_seed)
    qx = np.stack([q.position for q in queries])
    qo = np.array([q.occupancy for q in queries], dtype=np.float64)
    adam = AdamState.for_params([code], config.learning_rate)
    batch = min(config.batch, len(qx))
    for it in range(config.iterations):
        pick = rng.choice(len(qx), size=batch, replace=False)
        res = _shape_step(decoder, code, qx[pick], qo[pick])
        if not np.isfinite(res.total):
            raise TrainingDiverged(f"code fitting diverged at iteration {it}")
        adam_step([code], [res.code_grad], adam)
    return ShapeCode(code)


def predict_labels(decoder: ShapeDecoder, code: ShapeCode, points: np.ndarray) -> np.ndarray:
    """Most likely part per point; ties break to the lowest index."""
    e = embed(decoder, np.asarray(points, dtype=np.float64), code)
    p = predict_parts(decoder, e)
    return p.argmax(axis=1)


def segment_mesh(mesh: Mesh, code: ShapeCode, decoder: ShapeDecoder) -> np.ndarray:
    """Per-vertex part labels under a fitted code."""
    return predict_labels(decoder, code, mesh.vertices)


def save_shape_checkpoint(decoder: ShapeDecoder, codes, path) -> None:
    """Persist the decoder plus named training codes (dict or list)."""
    from .nn import save_checkpoint

    if not isinstance(codes, dict):
        codes = {f"{i:04d}": c for i, c in enumerate(codes)}
    code_map = {name: c.values if isinstance(c, ShapeCode) else np.asarray(c)
                for name, c in codes.items()}
    # metadata rides along as scalar codes
    code_map["meta_d"] = np.array([float(decoder.code_dim)])
    code_map["meta_k"] = np.array([float(decoder.part_count)])
    save_checkpoint(decoder.networks(), code_map, path)


def load_shape_checkpoint(path) -> tuple[ShapeDecoder, dict[str, ShapeCode]]:
    from .nn import load_checkpoint

    nets, code_map = load_checkpoint(path)
    part_count = int(code_map.pop("meta_k")[0])
    code_map.pop("meta_d")
    decoder = ShapeDecoder(
        f_net=nets["f"], o_net=nets["o"], p_net=nets["p"], q_net=nets["q"],
        part_count=part_count,
    )
    codes = {name: ShapeCode(v) for name, v in code_map.items()}
    return decoder, codes
