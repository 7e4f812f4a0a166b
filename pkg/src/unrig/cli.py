"""Command-line surface: deterministic, scriptable pipeline stages.

Every subcommand is reproducible from its config file and seed alone.
Usage errors exit 2 (argparse); runtime failures print one
machine-parseable line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line CLI error contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrig", description="Zero-shot pose transfer for unrigged characters"
    )
    sub = parser.add_subparsers(dest="command")

    def add_config_args(p, keys):
        p.add_argument("--config", default=None, help="key=value config file")
        from .config import RunConfig

        defaults = RunConfig()
        for key in keys:
            flag = "--" + key.replace("_", "-")
            kind = type(getattr(defaults, key))
            p.add_argument(flag, dest=key, type=kind, default=None,
                           help=f"override {key} (default {getattr(defaults, key)})")

    p = sub.add_parser("gen-data", help="generate the synthetic training corpus")
    p.add_argument("--out", required=True)
    add_config_args(p, ["seed", "grid", "characters", "poses", "pose_dim",
                        "stylized_train", "stylized_test", "test_poses"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-shape", help="train the shape understanding module")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--out", required=True, help="shape checkpoint path")
    add_config_args(p, ["seed", "code_dim", "part_count", "sigma", "code_init_std",
                        "shape_lr", "shape_steps", "shape_batch",
                        "shape_query_pool", "shape_surface_pool"])
    p.set_defaults(func=cmd_train_shape)

    p = sub.add_parser("fit-shape", help="fit a shape code for an unseen mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--out", required=True, help="output code tensor file")
    add_config_args(p, ["seed", "sigma", "code_init_std",
                        "fit_iterations", "fit_batch", "fit_pool"])
    p.set_defaults(func=cmd_fit_shape)

    p = sub.add_parser("segment", help="per-vertex part labels for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--code", required=True, help="fitted code file or trained code name")
    p.add_argument("--out", required=True, help="output JSON label list")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train-pose", help="train the pose deformation module")
    p.add_argument("--data", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--out", required=True, help="pose checkpoint path")
    add_config_args(p, ["seed", "pose_lr", "pose_batch", "pose_steps"])
    p.set_defaults(func=cmd_train_pose)

    p = sub.add_parser("transfer", help="deform a mesh to a target pose code")
    p.add_argument("--mesh", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--pose-code", required=True,
                   help="comma-separated floats or a tensor file with a pose_code entry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ttt-transfer", help="transfer with test-time training")
    p.add_argument("--mesh", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--code", required=True)
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--pose-code", required=True)
    p.add_argument("--source-mesh", required=True, help="driving character OBJ")
    p.add_argument("--source-code", required=True, help="driving code file or trained name")
    p.add_argument("--source-target", required=True,
                   help="driving character deformed to the target pose (OBJ)")
    p.add_argument("--out", required=True)
    add_config_args(p, ["seed", "lambda_v", "lambda_e", "lambda_dr",
                        "ttt_iterations", "ttt_lr", "pairs_per_part",
                        "ttt_surface_samples"])
    p.set_defaults(func=cmd_ttt_transfer)

    p = sub.add_parser("eval", help="score transfers over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--shape-ckpt", required=True)
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--pose-space", required=True)
    p.add_argument("--out", required=True, help="JSONL report path")
    p.add_argument("--csv", default=None, help="optional CSV report path")
    p.add_argument("--ttt", action="store_true", help="apply test-time training")
    add_config_args(p, ["seed", "sigma", "fit_iterations", "fit_batch", "fit_pool",
                        "lambda_v", "lambda_e", "lambda_dr", "ttt_iterations",
                        "ttt_lr", "pairs_per_part", "ttt_surface_samples"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _config(args, keys):
    from .config import load_config

    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .synth import gen_dataset

    cfg = _config(args, ["seed", "grid", "characters", "poses", "pose_dim",
                         "stylized_train", "stylized_test", "test_poses"])
    data = gen_dataset(
        n_characters=cfg.characters, n_poses=cfg.poses, seed=cfg.seed,
        out_dir=args.out, grid=cfg.grid, pose_dim=cfg.pose_dim,
        stylized_train=cfg.stylized_train, stylized_test=cfg.stylized_test,
        test_poses=cfg.test_poses,
    )
    print(f"wrote {data.paths.train_manifest}")
    print(f"wrote {data.paths.test_manifest}")
    return 0


def _load_train_items(data_dir):
    """Distinct characters from the train manifest as ShapeTrainItems."""
    from pathlib import Path

    from .shape import ShapeTrainItem
    from .synth import load_character_files, read_manifest

    rows = read_manifest(Path(data_dir) / "train_manifest.jsonl")
    seen = {}
    for row in rows:
        if row["character_id"] not in seen:
            seen[row["character_id"]] = row
    items, ids = [], []
    for idx, (cid, row) in enumerate(sorted(seen.items())):
        character = load_character_files(row)
        labeled = not character.labels_withheld
        items.append(
            ShapeTrainItem(
                mesh=character.mesh, code_index=idx,
                vertex_labels=character.part_labels if labeled else None,
                labeled=labeled,
            )
        )
        ids.append(cid)
    return items, ids, rows


def cmd_train_shape(args) -> int:
    from .shape import ShapeTrainConfig, save_shape_checkpoint, train_shape_module

    cfg = _config(args, ["seed", "code_dim", "part_count", "sigma", "code_init_std",
                         "shape_lr", "shape_steps", "shape_batch",
                         "shape_query_pool", "shape_surface_pool"])
    items, ids, _ = _load_train_items(args.data)
    train_cfg = ShapeTrainConfig(
        code_dim=cfg.code_dim, part_count=cfg.part_count,
        learning_rate=cfg.shape_lr, steps=cfg.shape_steps, batch=cfg.shape_batch,
        query_pool=cfg.shape_query_pool, surface_pool=cfg.shape_surface_pool,
        sigma=cfg.sigma, code_init_std=cfg.code_init_std, seed=cfg.seed,
    )
    decoder, codes, history = train_shape_module(items, train_cfg)
    save_shape_checkpoint(decoder, {cid: c for cid, c in zip(ids, codes)}, args.out)
    acc = ", ".join(f"{cid}={a:.3f}" for cid, a in zip(ids, history["occupancy_accuracy"]))
    print(f"final loss {history['total'][-1]:.4f}; occupancy accuracy {acc}")
    print(f"wrote {args.out}")
    return 0


def cmd_fit_shape(args) -> int:
    from .mesh import load_obj
    from .nn import save_tensors
    from .shape import ShapeFitConfig, fit_shape_code, load_shape_checkpoint

    cfg = _config(args, ["seed", "sigma", "code_init_std",
                         "fit_iterations", "fit_batch", "fit_pool"])
    decoder, _ = load_shape_checkpoint(args.shape_ckpt)
    mesh = load_obj(args.mesh)
    fit_cfg = ShapeFitConfig(
        iterations=cfg.fit_iterations, batch=cfg.fit_batch, query_pool=cfg.fit_pool,
        learning_rate=1e-4, sigma=cfg.sigma, code_init_std=cfg.code_init_std,
        seed=cfg.seed,
    )
    code = fit_shape_code(mesh, decoder, fit_cfg)
    save_tensors({"code": code.values}, args.out)
    print(f"wrote {args.out}")
    return 0


def _resolve_code(spec_str, shape_ckpt):
    """A code argument is either a tensor file or a trained code name."""
    from pathlib import Path

    from .nn import load_tensors
    from .shape import ShapeCode, load_shape_checkpoint

    if Path(spec_str).exists():
        return ShapeCode(load_tensors(spec_str)["code"])
    _, code_map = load_shape_checkpoint(shape_ckpt)
    if spec_str in code_map:
        return code_map[spec_str]
    raise FileNotFoundError(f"code {spec_str!r} is neither a file nor a trained code name")


def cmd_segment(args) -> int:
    from .mesh import load_obj
    from .shape import load_shape_checkpoint, segment_mesh

    decoder, _ = load_shape_checkpoint(args.shape_ckpt)
    code = _resolve_code(args.code, args.shape_ckpt)
    mesh = load_obj(args.mesh)
    labels = segment_mesh(mesh, code, decoder)
    with open(args.out, "w") as fh:
        json.dump([int(v) for v in labels], fh)
    print(f"wrote {args.out}")
    return 0


def cmd_train_pose(args) -> int:
    from pathlib import Path

    from .pose import PoseTrainConfig, deform_sample_batches, save_pose_checkpoint, train_pose_module
    from .shape import load_shape_checkpoint
    from .synth import read_manifest

    cfg = _config(args, ["seed", "pose_lr", "pose_batch", "pose_steps"])
    decoder, code_map = load_shape_checkpoint(args.shape_ckpt)
    rows = read_manifest(Path(args.data) / "train_manifest.jsonl")
    ids = sorted(code_map)
    codes = [code_map[cid] for cid in ids]
    shape_index_of = {cid: i for i, cid in enumerate(ids)}
    train_cfg = PoseTrainConfig(
        learning_rate=cfg.pose_lr, batch=cfg.pose_batch, steps=cfg.pose_steps,
        seed=cfg.seed,
    )
    batches = deform_sample_batches(rows, shape_index_of, batch=cfg.pose_batch,
                                    steps=cfg.pose_steps, seed=cfg.seed)
    net, history = train_pose_module(batches, codes, train_cfg, code_dim=decoder.code_dim)
    save_pose_checkpoint(net, args.out)
    print(f"loss {history['loss'][0]:.4f} -> {history['loss'][-1]:.4f}")
    print(f"wrote {args.out}")
    return 0


def _parse_pose_code(spec_str):
    from pathlib import Path

    from .nn import load_tensors
    from .pose import PoseCode

    if Path(spec_str).exists():
        return PoseCode(load_tensors(spec_str)["pose_code"])
    return PoseCode(np.array([float(v) for v in spec_str.split(",")]))


def cmd_transfer(args) -> int:
    from .mesh import load_obj, save_obj
    from .pose import load_pose_checkpoint, transfer_pose
    from .shape import load_shape_checkpoint

    load_shape_checkpoint(args.shape_ckpt)  # validates the checkpoint early
    code = _resolve_code(args.code, args.shape_ckpt)
    mesh = load_obj(args.mesh)
    net = load_pose_checkpoint(args.pose_ckpt)
    m = _parse_pose_code(args.pose_code)
    out = transfer_pose(mesh, code, m, net)
    save_obj(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_ttt_transfer(args) -> int:
    from .mesh import load_obj, save_obj
    from .pose import load_pose_checkpoint
    from .shape import load_shape_checkpoint
    from .ttt import TttConfig, run_ttt

    cfg = _config(args, ["seed", "lambda_v", "lambda_e", "lambda_dr",
                         "ttt_iterations", "ttt_lr", "pairs_per_part",
                         "ttt_surface_samples"])
    decoder, _ = load_shape_checkpoint(args.shape_ckpt)
    code = _resolve_code(args.code, args.shape_ckpt)
    source_code = _resolve_code(args.source_code, args.shape_ckpt)
    mesh = load_obj(args.mesh)
    source_mesh = load_obj(args.source_mesh)
    source_target = load_obj(args.source_target)
    if len(source_target.vertices) != len(source_mesh.vertices):
        raise ValueError("source target must share topology with the source mesh")
    driving_dx = source_target.vertices - source_mesh.vertices
    net = load_pose_checkpoint(args.pose_ckpt)
    m = _parse_pose_code(args.pose_code)
    ttt_cfg = TttConfig(
        lambda_v=cfg.lambda_v, lambda_e=cfg.lambda_e, lambda_dr=cfg.lambda_dr,
        iterations=cfg.ttt_iterations, learning_rate=cfg.ttt_lr,
        pairs_per_part=cfg.pairs_per_part, surface_samples=cfg.ttt_surface_samples,
        seed=cfg.seed,
    )
    result = run_ttt(mesh, code, decoder, source_mesh, source_code, driving_dx, m, net, ttt_cfg)
    save_obj(result.mesh, args.out)
    if result.diverged:
        print("warning: test-time training diverged; wrote the pre-training result")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import EvalFlags, evaluate

    cfg = _config(args, ["seed", "sigma", "fit_iterations", "fit_batch", "fit_pool",
                         "lambda_v", "lambda_e", "lambda_dr", "ttt_iterations",
                         "ttt_lr", "pairs_per_part", "ttt_surface_samples"])
    flags = EvalFlags(
        use_ttt=args.ttt, seed=cfg.seed, fit_iterations=cfg.fit_iterations,
        fit_batch=cfg.fit_batch, fit_pool=cfg.fit_pool, sigma=cfg.sigma,
        ttt_lambda_v=cfg.lambda_v, ttt_lambda_e=cfg.lambda_e,
        ttt_lambda_dr=cfg.lambda_dr, ttt_iterations=cfg.ttt_iterations,
        ttt_learning_rate=cfg.ttt_lr, ttt_pairs_per_part=cfg.pairs_per_part,
        ttt_surface_samples=cfg.ttt_surface_samples,
    )
    report = evaluate(args.manifest, args.shape_ckpt, args.pose_ckpt,
                      args.pose_space, flags)
    report.to_jsonl(args.out)
    if args.csv:
        report.to_csv(args.csv)
    print(json.dumps(report.aggregates))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    worst = run_gradcheck(seeds=args.seeds)
    failed = False
    for name, err in worst.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:5s} max relative error {err:.3e} [{status}]")
        failed = failed or err >= 1e-4
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
