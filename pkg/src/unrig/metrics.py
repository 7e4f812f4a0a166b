"""Evaluation metrics and the end-to-end evaluation driver.

PMD is the mean per-vertex Euclidean distance between prediction and
ground truth, reported x100 on height-normalized characters (so the
numbers read as centimeters for a 1 m character). ELS compares each
deformed edge's length against the ground-truth mesh; 1 is perfect and
the score drops by the relative length error.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, edges, load_obj
from .seeds import rng_for

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalRecord:
    character_id: str
    pose_id: int
    pmd: float
    els: float
    part_accuracy: float | None = None


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                row = {
                    "character_id": r.character_id,
                    "pose_id": r.pose_id,
                    "pmd": r.pmd,
                    "els": r.els,
                }
                if r.part_accuracy is not None:
                    row["part_accuracy"] = r.part_accuracy
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"aggregate": self.aggregates}) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["character_id", "pose_id", "pmd", "els", "part_acc"])
            for r in self.records:
                writer.writerow(
                    [r.character_id, r.pose_id, f"{r.pmd:.6f}", f"{r.els:.6f}",
                     "" if r.part_accuracy is None else f"{r.part_accuracy:.6f}"]
                )


def pmd(pred: Mesh, truth: Mesh) -> float:
    """Mean per-vertex L2 distance x100 under shared topology."""
    if len(pred.vertices) != len(truth.vertices) or not np.array_equal(pred.faces, truth.faces):
        raise ValueError("prediction and truth must share topology")
    dist = np.linalg.norm(pred.vertices - truth.vertices, axis=1)
    return float(100.0 * dist.mean())


def els(pred: Mesh, truth: Mesh) -> float:
    """Edge length score: 1 - mean |deformed/truth length ratio - 1|.

    Edges come from the ground-truth topology; zero-length truth edges
    are skipped with a warning and excluded from the average.
    """
    if len(pred.vertices) != len(truth.vertices) or not np.array_equal(pred.faces, truth.faces):
        raise ValueError("prediction and truth must share topology")
    e = edges(truth).edges
    truth_len = np.linalg.norm(truth.vertices[e[:, 0]] - truth.vertices[e[:, 1]], axis=1)
    keep = truth_len > 0.0
    if not keep.all():
        warnings.warn(
            f"skipping {int((~keep).sum())} zero-length ground-truth edges in ELS",
            RuntimeWarning,
            stacklevel=2,
        )
        e, truth_len = e[keep], truth_len[keep]
    pred_len = np.linalg.norm(pred.vertices[e[:, 0]] - pred.vertices[e[:, 1]], axis=1)
    score = 1.0 - np.abs(pred_len / truth_len - 1.0)
    return float(score.mean())


def part_accuracy(pred_labels: np.ndarray, truth_labels: np.ndarray) -> float:
    """Fraction of vertices whose predicted part matches the truth."""
    pred_labels = np.asarray(pred_labels).reshape(-1)
    truth_labels = np.asarray(truth_labels).reshape(-1)
    if pred_labels.shape != truth_labels.shape:
        raise ValueError("label length mismatch")
    return float((pred_labels == truth_labels).mean())


@dataclass
class EvalFlags:
    """Switches for one evaluation pass over a manifest."""

    use_ttt: bool = False
    seed: int = 0
    fit_iterations: int = 2000
    fit_batch: int = 2000
    fit_pool: int = 10000
    sigma: float = 0.05
    ttt_lambda_v: float = 0.05
    ttt_lambda_e: float = 0.01
    ttt_lambda_dr: float = 1.0
    ttt_iterations: int = 20
    ttt_learning_rate: float = 5e-3
    ttt_pairs_per_part: int = 256
    ttt_surface_samples: int = 2048


def evaluate(manifest_path, shape_ckpt_path, pose_ckpt_path, pose_space_path,
             flags: EvalFlags) -> EvalReport:
    """Transfer (optionally with TTT) every manifest row and score it.

    Shape codes for unseen characters are fitted once per character and
    reused across that character's poses. Part accuracy is reported once
    per character on its first row.
    """
    from .pose import PoseCode, load_pose_checkpoint, transfer_pose
    from .shape import (
        ShapeFitConfig,
        fit_shape_code,
        load_shape_checkpoint,
        segment_mesh,
    )
    from .synth import decode_pose, lbs_deform, load_character_files, load_pose_space, read_manifest
    from .ttt import TttConfig, run_ttt

    rows = read_manifest(manifest_path)
    decoder, code_map = load_shape_checkpoint(shape_ckpt_path)
    net = load_pose_checkpoint(pose_ckpt_path)
    space = load_pose_space(pose_space_path) if pose_space_path is not None else None

    report = EvalReport()
    if not rows:
        report.aggregates = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "count": 0,
            "note": "empty manifest",
        }
        return report

    by_char: dict[str, list[dict]] = {}
    for row in rows:
        by_char.setdefault(row["character_id"], []).append(row)

    fitted: dict[str, object] = {}
    characters: dict[str, object] = {}
    sources: dict[str, object] = {}
    for char_id, char_rows in by_char.items():
        character = load_character_files(char_rows[0])
        characters[char_id] = character
        fit_seed = int(rng_for(flags.seed, "fit", char_id).integers(0, 2**31 - 1))
        fit_cfg = ShapeFitConfig(
            iterations=flags.fit_iterations, batch=flags.fit_batch,
            query_pool=flags.fit_pool, sigma=flags.sigma, seed=fit_seed,
        )
        fitted[char_id] = fit_shape_code(character.mesh, decoder, fit_cfg)

        pred_labels = segment_mesh(character.mesh, fitted[char_id], decoder)
        acc = part_accuracy(pred_labels, character.part_labels)

        for k, row in enumerate(char_rows):
            m = PoseCode(np.asarray(row["pose_code"], dtype=np.float64))
            truth = load_obj(row["target_obj_path"])
            if flags.use_ttt:
                source_id = row.get("source_id")
                if source_id is None:
                    raise ValueError(f"row for {char_id} pose {row['pose_id']} lacks source_id for TTT")
                if source_id not in sources:
                    src_row = _find_character_row(rows, manifest_path, source_id)
                    sources[source_id] = load_character_files(src_row)
                source = sources[source_id]
                if source_id not in code_map:
                    raise ValueError(f"no trained shape code for source {source_id}")
                pose = decode_pose(space, np.asarray(row["pose_code"], dtype=np.float64))
                driving_dx = lbs_deform(source, pose).vertices - source.mesh.vertices
                ttt_seed = int(
                    rng_for(flags.seed, "ttt", char_id, row["pose_id"]).integers(0, 2**31 - 1)
                )
                cfg = TttConfig(
                    lambda_v=flags.ttt_lambda_v, lambda_e=flags.ttt_lambda_e,
                    lambda_dr=flags.ttt_lambda_dr, iterations=flags.ttt_iterations,
                    learning_rate=flags.ttt_learning_rate,
                    pairs_per_part=flags.ttt_pairs_per_part,
                    surface_samples=flags.ttt_surface_samples, seed=ttt_seed,
                )
                result = run_ttt(
                    character.mesh, fitted[char_id], decoder,
                    source.mesh, code_map[source_id], driving_dx, m, net, cfg,
                )
                pred = result.mesh
            else:
                pred = transfer_pose(character.mesh, fitted[char_id], m, net)
            report.records.append(
                EvalRecord(
                    character_id=char_id,
                    pose_id=int(row["pose_id"]),
                    pmd=pmd(pred, truth),
                    els=els(pred, truth),
                    part_accuracy=acc if k == 0 else None,
                )
            )

    pmds = [r.pmd for r in report.records]
    elss = [r.els for r in report.records]
    accs = [r.part_accuracy for r in report.records if r.part_accuracy is not None]
    report.aggregates = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "count": len(report.records),
        "mean_pmd": float(np.mean(pmds)),
        "mean_els": float(np.mean(elss)),
        "mean_part_accuracy": float(np.mean(accs)) if accs else None,
        "use_ttt": flags.use_ttt,
    }
    return report


def _find_character_row(rows: list[dict], manifest_path, char_id: str) -> dict:
    """Locate asset paths for a character, falling back to the train manifest."""
    for row in rows:
        if row["character_id"] == char_id:
            return row
    from pathlib import Path

    from .synth import read_manifest

    sibling = Path(manifest_path).parent / "train_manifest.jsonl"
    if sibling.exists():
        for row in read_manifest(sibling):
            if row["character_id"] == char_id:
                return row
    raise FileNotFoundError(f"no asset row found for character {char_id}")
