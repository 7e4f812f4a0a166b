"""Flat key=value run configuration shared by every CLI subcommand.

Defaults carry the published hyperparameters (learning rates, batch
sizes, loss weights, iteration counts). A config file holds one
``key = value`` pair per line with ``#`` comments; CLI flags override
file values. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class RunConfig:
    seed: int = 0
    code_dim: int = 128
    part_count: int = 16
    pose_dim: int = 32
    grid: int = 48
    sigma: float = 0.05
    code_init_std: float = 0.01
    # shape module training
    shape_lr: float = 1e-4
    shape_steps: int = 2000
    shape_batch: int = 64
    shape_query_pool: int = 10000
    shape_surface_pool: int = 4096
    # shape code fitting for unseen characters
    fit_iterations: int = 2000
    fit_batch: int = 2000
    fit_pool: int = 10000
    # pose module training
    pose_lr: float = 3e-4
    pose_batch: int = 128
    pose_steps: int = 2000
    # test-time training
    lambda_v: float = 0.05
    lambda_e: float = 0.01
    lambda_dr: float = 1.0
    ttt_iterations: int = 20
    ttt_lr: float = 5e-3
    pairs_per_part: int = 256
    ttt_surface_samples: int = 2048
    # dataset generation
    characters: int = 4
    poses: int = 200
    stylized_train: int = 2
    stylized_test: int = 2
    test_poses: int = 20
    jobs: int = 1


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path) -> dict:
    """Read key=value lines; values typed by the matching RunConfig field."""
    overrides = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key = value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            overrides[key] = _coerce(key, value)
    return overrides


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def load_config(path=None, cli_overrides: dict | None = None) -> RunConfig:
    """File values first, CLI values on top, defaults underneath."""
    values = {}
    if path is not None:
        values.update(parse_config_file(path))
    if cli_overrides:
        for key, value in cli_overrides.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = value
    return RunConfig(**values)
