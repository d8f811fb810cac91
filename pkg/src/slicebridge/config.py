"""Experiment configuration shared by all CLI subcommands."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class ExperimentConfig:
    # Diffusion
    T: int = 1000
    sample_steps: int = 100
    s: float = 1.0
    eps_const: float = 1e-8
    x0_iters: int = 3
    objective: str = "unitized"
    # Retrieval
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.5
    tau_percentile: float = 5.0
    tau_mode: str = "percentile"
    offsets: tuple[int, ...] = (1, 2)
    max_pos_delta: int | None = None  # default: 10% of dense extent
    # Control
    slerp_augment_prob: float = 0.25
    # Data
    image_size: int = 32
    n_subjects: int = 24
    slices_per_subject: int = 40
    families: int = 6
    intensity_jitter: float = 0.15
    subject_amp: float = 0.05
    texture_amp: float = 0.05
    geom_jitter: float = 1.0
    eval_subjects: int = 4
    sparsify_factor: int = 2
    # Training
    bridge_iters: int = 2000
    bridge_batch: int = 8
    bridge_lr: float = 1e-3
    retriever_iters: int = 300
    retriever_lr: float = 1e-3
    control_iters: int = 800
    control_batch: int = 8
    control_lr: float = 2e-4
    gradstats_iters: int = 6000
    gradstats_window: int = 100
    # Misc
    seed: int = 0
    db_fraction: float = 1.0
    use_control: bool = True

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "offsets" in raw:
            raw["offsets"] = tuple(raw["offsets"])
        return cls(**raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def resolved_max_pos_delta(self) -> int:
        if self.max_pos_delta is not None:
            return self.max_pos_delta
        return max(1, self.slices_per_subject // 10)
