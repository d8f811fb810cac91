"""SLERP, per-position reconstruction planning, and volume reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import bridge
from .data import Slice, Volume
from .errors import NoCandidateError
from .retrieval import KnowledgeBase, query
from .schedule import BridgeSchedule

PARALLEL_TOL = 1e-6

DIRECT = "direct"
RETRIEVED = "retrieved"
INTERPOLATED = "interpolated"


def slerp(x_i: np.ndarray, x_j: np.ndarray, alpha: float,
          parallel_tol: float = PARALLEL_TOL) -> np.ndarray:
    """Spherical linear interpolation between two arrays (flattened for the
    angle computation); falls back to linear interpolation when the angle is
    below parallel_tol."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    ni = np.linalg.norm(x_i)
    nj = np.linalg.norm(x_j)
    if ni == 0 or nj == 0:
        raise ValueError("slerp requires nonzero-norm inputs")
    cos = np.clip(np.vdot(x_i, x_j) / (ni * nj), -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < parallel_tol:
        return (1.0 - alpha) * x_i + alpha * x_j
    s = np.sin(theta)
    return (np.sin((1.0 - alpha) * theta) / s) * x_i + \
        (np.sin(alpha * theta) / s) * x_j


@dataclass
class PlanEntry:
    position: int
    directive: str  # direct | retrieved | interpolated
    y: np.ndarray                      # bridge input at this position
    control: np.ndarray | None = None  # retrieved reference pixels, if any
    similarity: float | None = None
    neighbors: tuple[int, int] | None = None
    alpha: float | None = None
    record: dict | None = None

    def manifest(self) -> dict:
        return {
            "position": self.position,
            "directive": self.directive,
            "similarity": self.similarity,
            "neighbors": list(self.neighbors) if self.neighbors else None,
            "alpha": self.alpha,
            "retrieved": self.record["locator"] if self.record else None,
        }


@dataclass
class ReconstructionPlan:
    subject_id: str
    entries: list[PlanEntry] = field(default_factory=list)

    def manifest(self) -> list[dict]:
        return [e.manifest() for e in self.entries]


def make_slice_store(volumes: list[Volume]) -> dict[str, np.ndarray]:
    """Locator -> pixels lookup for resolving retrieved references."""
    return {f"{s.subject_id}:{s.position}": s.pixels
            for v in volumes for s in v.slices}


def plan_reconstruction(sparse_volume: Volume, kb: KnowledgeBase, encoder,
                        target_positions, slice_store: dict[str, np.ndarray],
                        max_pos_delta: int | None = None) -> ReconstructionPlan:
    """Assign a directive to every dense-grid position.

    Positions carrying an original slice are direct.  Each missing position
    gets a SLERP interpolant of its nearest source neighbors as bridge input
    and KB probe; a hit yields a retrieved entry, a miss or exhausted
    position filter an interpolated one.
    """
    if len(sparse_volume.slices) < 2:
        raise ValueError("sparse volume must have at least 2 slices")
    source_pos = sparse_volume.positions()
    target_positions = sorted(target_positions)
    if not set(source_pos) <= set(target_positions):
        raise ValueError("target grid must contain all source positions")
    plan = ReconstructionPlan(subject_id=sparse_volume.subject_id)
    for p in target_positions:
        if p in source_pos:
            plan.entries.append(PlanEntry(
                position=p, directive=DIRECT, y=sparse_volume.get(p).pixels))
            continue
        left = [q for q in source_pos if q < p]
        right = [q for q in source_pos if q > p]
        if left and right:
            i, j = max(left), min(right)
            alpha = (p - i) / (j - i)
        elif left:
            i = j = max(left)
            alpha = 0.5
        else:
            i = j = min(right)
            alpha = 0.5
        if i == j:
            y_query = sparse_volume.get(i).pixels.astype(np.float64)
        else:
            y_query = slerp(sparse_volume.get(i).pixels,
                            sparse_volume.get(j).pixels, alpha)
        y_query = np.clip(y_query, 0.0, 1.0).astype(np.float32)
        try:
            record, sim, hit = query(kb, encoder, y_query, position_hint=p,
                                     max_pos_delta=max_pos_delta)
        except NoCandidateError:
            record, sim, hit = None, None, False
        if hit:
            plan.entries.append(PlanEntry(
                position=p, directive=RETRIEVED, y=y_query,
                control=slice_store[record["locator"]], similarity=sim,
                neighbors=(i, j), alpha=alpha, record=record))
        else:
            plan.entries.append(PlanEntry(
                position=p, directive=INTERPOLATED, y=y_query,
                similarity=sim, neighbors=(i, j), alpha=alpha))
    return plan


def entry_seed(global_seed: int, position: int) -> int:
    return int(np.random.SeedSequence((global_seed, position)).generate_state(1)[0])


def reconstruct_volume(plan: ReconstructionPlan, bridge_model, branch,
                       sched: BridgeSchedule, num_steps: int, seed: int = 0,
                       use_control: bool = True,
                       deterministic: bool = False) -> Volume:
    """Run controlled sampling for every plan entry and assemble the dense
    target volume.  With use_control False the branch is bypassed entirely
    (uncontrolled ablation)."""
    slices = []
    for entry in plan.entries:
        y = torch.from_numpy(np.asarray(entry.y, dtype=np.float32))[None, None]
        if entry.directive == RETRIEVED:
            r_np = entry.control
        else:
            r_np = entry.y  # self-conditioning for direct and interpolated
        gen = torch.Generator().manual_seed(entry_seed(seed, entry.position))
        if use_control and branch is not None:
            r = torch.from_numpy(np.asarray(r_np, dtype=np.float32))[None, None]
            out = bridge.sample(bridge_model, sched, y, num_steps, gen,
                                branch=branch, control=r,
                                deterministic=deterministic)
        else:
            out = bridge.sample(bridge_model, sched, y, num_steps, gen,
                                deterministic=deterministic)
        slices.append(Slice(out[0, 0].numpy().astype(np.float32),
                            plan.subject_id, "target", entry.position))
    return Volume(plan.subject_id, "target", slices,
                  dense_extent=len(plan.entries))


def nearest_neighbor_baseline(plan: ReconstructionPlan,
                              reconstructed: Volume) -> Volume:
    """Duplicate each direct position's reconstructed slice into the missing
    positions nearest to it; the comparison baseline for continuity."""
    direct_pos = [e.position for e in plan.entries if e.directive == DIRECT]
    slices = []
    for entry in plan.entries:
        nearest = min(direct_pos, key=lambda q: (abs(q - entry.position), q))
        pix = reconstructed.get(nearest).pixels
        slices.append(Slice(pix.copy(), plan.subject_id, "target",
                            entry.position))
    return Volume(plan.subject_id, "target", slices,
                  dense_extent=reconstructed.dense_extent)
