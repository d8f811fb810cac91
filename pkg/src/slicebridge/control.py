"""Control-branch training against a frozen bridge backbone, with
retrieval-defined pairings, and controlled sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import bridge
from .data import Volume
from .errors import NoCandidateError
from .nets import ControlBranch, Denoiser, Encoder
from .pipeline import slerp
from .retrieval import KnowledgeBase, query
from .schedule import BridgeSchedule


@dataclass
class ControlTrainingPair:
    y: np.ndarray       # bridge input (source slice, possibly slerp-augmented)
    r: np.ndarray       # retrieved source slice (condition)
    target: np.ndarray  # target-modality slice paired with r
    subject_y: str
    subject_r: str
    position: int


@dataclass
class ControlTrainOpts:
    iters: int = 400
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0


def make_control_pairs(corpus: list[tuple[Volume, Volume]], encoder: Encoder,
                       kb: KnowledgeBase, slerp_augment_prob: float = 0.25,
                       seed: int = 0, max_pos_delta: int | None = None
                       ) -> tuple[list[ControlTrainingPair], int]:
    """Build (y, r, target-of-r) training pairs via cross-subject retrieval.

    Retrieval excludes the anchor's own subject; misses and exhausted
    position filters skip the pair.  With probability slerp_augment_prob the
    input y is replaced by slerp(y, r; alpha ~ U(0, 1)).
    Returns (pairs, skipped count).
    """
    if not 0.0 <= slerp_augment_prob <= 1.0:
        raise ValueError("slerp_augment_prob must be in [0, 1]")
    target_by_loc = {f"{tgt.subject_id}:{s.position}": s.pixels
                     for _, tgt in corpus for s in tgt.slices}
    source_by_loc = {f"{src.subject_id}:{s.position}": s.pixels
                     for src, _ in corpus for s in src.slices}
    rng = np.random.default_rng(seed)
    pairs = []
    skipped = 0
    for src, _ in corpus:
        for s in src.slices:
            try:
                record, sim, hit = query(
                    kb, encoder, s.pixels, position_hint=s.position,
                    max_pos_delta=max_pos_delta,
                    exclude_subject=s.subject_id)
            except NoCandidateError:
                skipped += 1
                continue
            if not hit:
                skipped += 1
                continue
            r = source_by_loc[record["locator"]]
            target = target_by_loc[
                f"{record['subject_id']}:{record['position']}"]
            y = s.pixels
            if rng.uniform() < slerp_augment_prob:
                y = np.clip(slerp(y, r, float(rng.uniform())),
                            0.0, 1.0).astype(np.float32)
            pairs.append(ControlTrainingPair(
                y=y, r=r, target=target, subject_y=s.subject_id,
                subject_r=record["subject_id"], position=s.position))
    return pairs, skipped


def _pair_tensors(pairs: list[ControlTrainingPair], idx) -> tuple:
    x0 = torch.from_numpy(np.stack([pairs[i].target for i in idx])[:, None].copy())
    y = torch.from_numpy(np.stack([pairs[i].y for i in idx])[:, None].copy())
    r = torch.from_numpy(np.stack([pairs[i].r for i in idx])[:, None].copy())
    return x0, y, r


def train_control(bridge_model: Denoiser, branch: ControlBranch,
                  pairs: list[ControlTrainingPair], sched: BridgeSchedule,
                  objective: str = bridge.UNITIZED,
                  opts: ControlTrainOpts = ControlTrainOpts()) -> list[float]:
    """Optimize only the branch on the noise-matching loss; the backbone is
    frozen and bit-identical before and after."""
    if not pairs:
        raise ValueError("pair stream is empty")
    bridge_model.requires_grad_(False)
    bridge_model.eval()
    torch.manual_seed(opts.seed)
    gen = torch.Generator().manual_seed(opts.seed)
    optim = torch.optim.Adam(branch.parameters(), lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    trace = []
    for _ in range(opts.iters):
        idx = rng.integers(0, len(pairs), size=min(opts.batch_size, len(pairs)))
        x0, y, r = _pair_tensors(pairs, idx)
        loss = bridge.training_loss(bridge_model, x0, y, sched, objective,
                                    gen, branch=branch, control=r)
        optim.zero_grad()
        loss.backward()
        optim.step()
        trace.append(float(loss.detach()))
    return trace


def controlled_sample(bridge_model: Denoiser, branch: ControlBranch,
                      sched: BridgeSchedule, y: torch.Tensor, r: torch.Tensor,
                      num_steps: int,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """bridge.sample with control residuals from the branch at every step."""
    return bridge.sample(bridge_model, sched, y, num_steps, generator,
                         branch=branch, control=r)
