"""Finite-difference verification of every analytic gradient path.

Each check wires up the real loss exactly as the training loops do, on
width-reduced networks so the full per-coordinate central-difference
sweep stays fast, and reports the worst relative error. The combined
test-time objective is checked as one function of the pose network.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, edges, sample_surface, surface_positions
from .nn import backward, finite_difference_gradients, forward, relative_gradient_error
from .pose import POSE_DIM, PoseCode, assemble_inputs, build_pose_net, deform_point
from .seeds import rng_for
from .shape import (
    ShapeCode,
    ShapeTrainConfig,
    _shape_step,
    build_decoder,
    embed,
    invert,
    loss_inverse,
    loss_occupancy,
    loss_part,
    predict_labels,
    predict_occupancy,
    predict_parts,
)
from .ttt import (
    _edge_loss_and_grad,
    _volume_loss_and_grad,
    loss_driving,
    loss_edge,
    loss_volume,
    sample_pairs,
)

LOSS_NAMES = ("L_O", "L_P", "L_Q", "L_D", "L_v", "L_e", "L_dr", "L_T")


def _tetra() -> Mesh:
    verts = np.array(
        [[0.3, 0.0, 0.0], [-0.2, 0.25, 0.1], [-0.1, -0.2, 0.22], [0.0, 0.05, -0.3]]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    return Mesh(verts, faces)


def _shape_setup(seed: int):
    dec = build_decoder(ShapeTrainConfig(code_dim=6, part_count=3, seed=seed), hidden_scale=1 / 16)
    rng = rng_for(seed, "gradcheck_shape")
    code = rng.normal(scale=0.1, size=6)
    qx = rng.normal(scale=0.3, size=(5, 3))
    qo = rng.integers(0, 2, size=5).astype(float)
    sx = rng.normal(scale=0.3, size=(4, 3))
    sl = rng.integers(0, 3, size=4)
    return dec, code, qx, qo, sx, sl


def _check_shape_loss(seed: int, which: str) -> float:
    dec, code, qx, qo, sx, sl = _shape_setup(seed)
    res = _shape_step(dec, code, qx, qo, sx, sl)
    params = dec.parameters() + [code]
    analytic = []
    for name in dec.networks():
        analytic += res.net_grads[name]
    analytic = analytic + [res.code_grad]

    if which == "L_O":
        # isolate: recompute with only the occupancy path active
        res = _shape_step(dec, code, qx, qo, use_inverse=False)
        analytic = res.net_grads["f"] + res.net_grads["o"] + [res.code_grad]
        params = dec.f_net.parameters() + dec.o_net.parameters() + [code]

        def fun():
            e = embed(dec, qx, ShapeCode(code))
            return loss_occupancy(predict_occupancy(dec, e), qo)

    elif which == "L_P":
        res = _shape_step(dec, code, qx[:0], qo[:0], sx, sl, use_inverse=False)
        analytic = res.net_grads["f"] + res.net_grads["p"] + [res.code_grad]
        params = dec.f_net.parameters() + dec.p_net.parameters() + [code]

        def fun():
            e = embed(dec, sx, ShapeCode(code))
            return loss_part(predict_parts(dec, e), sl)

    elif which == "L_Q":
        full = _shape_step(dec, code, qx, qo)
        occ_only = _shape_step(dec, code, qx, qo, use_inverse=False)
        analytic = [
            f - o for f, o in zip(full.net_grads["f"], occ_only.net_grads["f"])
        ] + full.net_grads["q"] + [full.code_grad - occ_only.code_grad]
        params = dec.f_net.parameters() + dec.q_net.parameters() + [code]

        def fun():
            e = embed(dec, qx, ShapeCode(code))
            return loss_inverse(invert(dec, ShapeCode(code), e), qx)

    else:
        raise ValueError(which)
    numeric = finite_difference_gradients(fun, params)
    return relative_gradient_error(analytic, numeric)


def _pose_setup(seed: int):
    rng = rng_for(seed, "gradcheck_pose")
    net = build_pose_net(6, seed=seed, hidden_scale=1 / 32)
    for w in net.m_net.weights:
        w += rng.normal(scale=0.05, size=w.shape)
    s = ShapeCode(rng.normal(scale=0.1, size=6))
    m = PoseCode(rng.normal(size=POSE_DIM))
    return rng, net, s, m


def _check_deform(seed: int) -> float:
    rng, net, s, m = _pose_setup(seed)
    x = rng.normal(scale=0.3, size=(4, 3))
    truth = rng.normal(scale=0.1, size=(4, 3))
    inputs = assemble_inputs(x, s.values, m.values)
    pred, tape = forward(net.m_net, inputs)
    grads, _ = backward(net.m_net, tape, 2.0 * (pred - truth))

    def fun():
        from .pose import loss_deform

        return loss_deform(deform_point(net, x, s, m), truth)

    numeric = finite_difference_gradients(fun, net.m_net.parameters())
    return relative_gradient_error(grads.parameters(), numeric)


def _ttt_setup(seed: int):
    rng, net, s, m = _pose_setup(seed)
    dec = build_decoder(ShapeTrainConfig(code_dim=6, part_count=2, seed=seed), hidden_scale=1 / 32)
    mesh = _tetra()
    surf = sample_surface(mesh, 8, seed=seed)
    positions = surface_positions(surf)
    labels = predict_labels(dec, s, positions)
    pairs = sample_pairs(positions, labels, pairs_per_part=4, seed=seed)
    source = Mesh(_tetra().vertices * 0.8, _tetra().faces)
    src_code = ShapeCode(rng.normal(scale=0.1, size=6))
    driving_dx = rng.normal(scale=0.05, size=source.vertices.shape)
    e_idx = edges(mesh).edges
    rest_len = np.linalg.norm(mesh.vertices[e_idx[:, 0]] - mesh.vertices[e_idx[:, 1]], axis=1)
    return rng, net, s, m, mesh, positions, pairs, source, src_code, driving_dx, e_idx, rest_len


def _check_ttt(seed: int, which: str) -> float:
    (rng, net, s, m, mesh, positions, pairs, source, src_code, driving_dx,
     e_idx, rest_len) = _ttt_setup(seed)
    params = net.m_net.parameters()
    lam_v, lam_e, lam_dr = 0.05, 0.01, 1.0

    def grad_volume(scale=1.0):
        inputs = assemble_inputs(positions, s.values, m.values)
        off, tape = forward(net.m_net, inputs)
        _, g_off = _volume_loss_and_grad(pairs, positions, off)
        g, _ = backward(net.m_net, tape, scale * g_off)
        return g.parameters()

    def grad_edge(scale=1.0):
        inputs = assemble_inputs(mesh.vertices, s.values, m.values)
        off, tape = forward(net.m_net, inputs)
        _, g_off = _edge_loss_and_grad(mesh, e_idx, rest_len, mesh.vertices + off)
        g, _ = backward(net.m_net, tape, scale * g_off)
        return g.parameters()

    def grad_driving(scale=1.0):
        inputs = assemble_inputs(source.vertices, src_code.values, m.values)
        off, tape = forward(net.m_net, inputs)
        g, _ = backward(net.m_net, tape, scale * 2.0 * (off - driving_dx))
        return g.parameters()

    if which == "L_v":
        analytic = grad_volume()
        fun = lambda: loss_volume(pairs, deform_point(net, positions, s, m))
    elif which == "L_e":
        analytic = grad_edge()
        fun = lambda: loss_edge(mesh, mesh.vertices + deform_point(net, mesh.vertices, s, m))
    elif which == "L_dr":
        analytic = grad_driving()
        fun = lambda: loss_driving(deform_point(net, source.vertices, src_code, m), driving_dx)
    elif which == "L_T":
        parts = [grad_volume(lam_v), grad_edge(lam_e), grad_driving(lam_dr)]
        analytic = [sum(gs) for gs in zip(*parts)]

        def fun():
            return (
                lam_v * loss_volume(pairs, deform_point(net, positions, s, m))
                + lam_e * loss_edge(mesh, mesh.vertices + deform_point(net, mesh.vertices, s, m))
                + lam_dr * loss_driving(deform_point(net, source.vertices, src_code, m), driving_dx)
            )

    else:
        raise ValueError(which)
    numeric = finite_difference_gradients(fun, params)
    return relative_gradient_error(analytic, numeric)


def run_gradcheck(seeds: int = 10) -> dict[str, float]:
    """Worst relative error per loss across the given number of seeds."""
    worst = {name: 0.0 for name in LOSS_NAMES}
    for seed in range(seeds):
        for name in ("L_O", "L_P", "L_Q"):
            worst[name] = max(worst[name], _check_shape_loss(seed, name))
        worst["L_D"] = max(worst["L_D"], _check_deform(seed))
        for name in ("L_v", "L_e", "L_dr", "L_T"):
            worst[name] = max(worst[name], _check_ttt(seed, name))
    return worst
