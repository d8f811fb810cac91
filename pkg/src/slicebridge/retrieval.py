"""Contrastive encoder training, knowledge base, threshold calibration,
and position-filtered querying."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Slice, Volume
from .errors import NoCandidateError
from .nets import Encoder


@dataclass
class PositiveSpec:
    offsets: tuple[int, ...] = (1, 2)

    def validate(self):
        if len(set(self.offsets)) != len(self.offsets) or min(self.offsets) < 1:
            raise ValueError("offsets must be distinct and >= 1")


@dataclass
class KnowledgeBase:
    embeddings: np.ndarray  # (rows, embed_dim), unit-normalized float32
    records: list[dict]
    embed_dim: int
    tau: float | None = None

    def __post_init__(self):
        if len(self.records) != self.embeddings.shape[0]:
            raise ValueError("records length must match embedding rows")


@dataclass
class TrainOpts:
    iters: int = 300
    batch_subjects: int = 8
    lr: float = 1e-3
    seed: int = 0


def contrastive_loss(anchor_emb: torch.Tensor, positive_embs: torch.Tensor,
                     negative_embs: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """-log of the positive similarity mass over the total mass, with
    sim(i, j) = exp(phi_i . phi_j / alpha)."""
    if positive_embs.shape[0] == 0 or negative_embs.shape[0] == 0:
        raise ValueError("positive and negative sets must be nonempty")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pos_logits = positive_embs @ anchor_emb / alpha
    neg_logits = negative_embs @ anchor_emb / alpha
    log_pos = torch.logsumexp(pos_logits, dim=0)
    log_all = torch.logsumexp(torch.cat([pos_logits, neg_logits]), dim=0)
    return log_all - log_pos


def perceptual_loss(anchor_feat: torch.Tensor, positive_feats: torch.Tensor,
                    negative_feats: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Same log-ratio form with d(i, j) = exp(-||f_i - f_j||^2 / beta)."""
    if positive_feats.shape[0] == 0 or negative_feats.shape[0] == 0:
        raise ValueError("positive and negative sets must be nonempty")
    if beta <= 0:
        raise ValueError("beta must be positive")
    pos_logits = -((positive_feats - anchor_feat) ** 2).sum(dim=1) / beta
    neg_logits = -((negative_feats - anchor_feat) ** 2).sum(dim=1) / beta
    log_pos = torch.logsumexp(pos_logits, dim=0)
    log_all = torch.logsumexp(torch.cat([pos_logits, neg_logits]), dim=0)
    return log_all - log_pos


def _slice_tensor(slices: list[Slice]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.pixels for s in slices])[:, None].copy())


def train_retriever(encoder: Encoder, volumes: list[Volume],
                    spec: PositiveSpec = PositiveSpec(), alpha: float = 1.0,
                    beta: float = 1.0, lam: float = 0.5,
                    opts: TrainOpts = TrainOpts()) -> list[float]:
    """Fine-tune the encoder with the combined contrastive objective.

    Anchors are slices at sampled positions, positives the same-subject
    slices at the configured forward offsets, negatives all batch slices
    from other subjects.  Returns the per-iteration loss trace.
    """
    spec.validate()
    max_k = max(spec.offsets)
    if len(volumes) < 2:
        raise ValueError("corpus must contain at least 2 subjects")
    if any(len(v.slices) <= max_k for v in volumes):
        raise ValueError("every volume must have more slices than max offset")

    rng = np.random.default_rng(opts.seed)
    torch.manual_seed(opts.seed)
    optim = torch.optim.Adam(encoder.parameters(), lr=opts.lr)
    trace = []
    for _ in range(opts.iters):
        n_sub = min(opts.batch_subjects, len(volumes))
        subject_ix = rng.choice(len(volumes), size=n_sub, replace=False)
        groups = []  # (subject index, anchor tensor row span)
        tensors = []
        for vi in subject_ix:
            vol = volumes[vi]
            p = int(rng.integers(0, len(vol.slices) - max_k))
            group = [vol.slices[p]] + [vol.slices[p + k] for k in spec.offsets]
            groups.append((vi, len(group)))
            tensors.extend(group)
        batch = _slice_tensor(tensors)
        embs, taps = encoder(batch)

        loss = torch.zeros(())
        offset = 0
        spans = []
        for vi, count in groups:
            spans.append((vi, offset, offset + count))
            offset += count
        for vi, lo, hi in spans:
            neg_ix = [i for wj, wlo, whi in spans if wj != vi
                      for i in range(wlo, whi)]
            pos_ix = list(range(lo + 1, hi))
            c = contrastive_loss(embs[lo], embs[pos_ix], embs[neg_ix], alpha)
            if lam != 0.0:
                c = c + lam * perceptual_loss(taps[lo], taps[pos_ix],
                                              taps[neg_ix], beta)
            loss = loss + c
        loss = loss / len(spans)
        optim.zero_grad()
        loss.backward()
        optim.step()
        trace.append(float(loss.detach()))
    return trace


def embed_slices(encoder: Encoder, slices: list[Slice],
                 chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(slices), chunk):
            embs, _ = encoder(_slice_tensor(slices[i:i + chunk]))
            out.append(embs.numpy())
    return np.concatenate(out, axis=0)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def build_kb(encoder: Encoder, volumes: list[Volume]) -> KnowledgeBase:
    """One unit-normalized row per source slice, in manifest order."""
    slices = [s for v in volumes for s in v.slices]
    if not slices:
        raise ValueError("corpus is empty")
    emb = _normalize_rows(embed_slices(encoder, slices)).astype(np.float32)
    records = [{
        "subject_id": s.subject_id,
        "modality": s.modality,
        "position": s.position,
        "locator": f"{s.subject_id}:{s.position}",
    } for s in slices]
    return KnowledgeBase(embeddings=emb, records=records,
                         embed_dim=emb.shape[1], tau=None)


def best_match_scores(encoder: Encoder, kb: KnowledgeBase,
                      queries: list[Slice]) -> np.ndarray:
    """Per-query best cosine against the KB, excluding same-subject rows."""
    if not queries:
        raise ValueError("queries must be nonempty")
    q = _normalize_rows(embed_slices(encoder, queries))
    subjects = np.array([r["subject_id"] for r in kb.records])
    scores = np.empty(len(queries))
    sims_all = q @ kb.embeddings.T
    for i, s in enumerate(queries):
        mask = subjects != s.subject_id
        if not mask.any():
            raise ValueError("calibration requires cross-subject KB rows")
        scores[i] = sims_all[i][mask].max()
    return scores


def calibrate_tau(encoder: Encoder, kb: KnowledgeBase, queries: list[Slice],
                  percentile_p: float = 5.0, mode: str = "percentile") -> float:
    """Calibrate the hit threshold from best-match score statistics."""
    if not 0 < percentile_p < 100:
        raise ValueError("percentile_p must be in (0, 100)")
    scores = best_match_scores(encoder, kb, queries)
    if mode == "top_mean":
        k = max(1, int(round(len(scores) * percentile_p / 100.0)))
        tau = float(np.sort(scores)[-k:].mean())
    elif mode == "percentile":
        tau = float(np.percentile(scores, 100.0 - percentile_p, method="lower"))
    else:
        raise ValueError(f"unknown tau mode {mode!r}")
    kb.tau = tau
    return tau


def query(kb: KnowledgeBase, encoder: Encoder, probe: np.ndarray,
          position_hint: int | None = None, max_pos_delta: int | None = None,
          exclude_subject: str | None = None) -> tuple[dict, float, bool]:
    """Return (best record, cosine similarity, hit flag) for a probe slice."""
    if kb.tau is None or math.isnan(kb.tau):
        raise ValueError("knowledge base is not calibrated (tau unset)")
    with torch.no_grad():
        emb, _ = encoder(torch.from_numpy(
            np.asarray(probe, dtype=np.float32))[None, None])
    e = emb[0].numpy()
    e = e / np.linalg.norm(e)
    mask = np.ones(len(kb.records), dtype=bool)
    if position_hint is not None and max_pos_delta is not None:
        pos = np.array([r["position"] for r in kb.records])
        mask &= np.abs(pos - position_hint) <= max_pos_delta
    if exclude_subject is not None:
        mask &= np.array([r["subject_id"] != exclude_subject
                          for r in kb.records])
    if not mask.any():
        raise NoCandidateError("position filter excludes all knowledge-base rows")
    sims = kb.embeddings @ e
    sims[~mask] = -np.inf
    best = int(np.argmax(sims))  # argmax takes the lowest index on ties
    sim = float(sims[best])
    return kb.records[best], sim, sim >= kb.tau


def retrieval_accuracy(encoder: Encoder, eval_volumes: list[Volume]) -> float:
    """Subject-match top-1 accuracy with position-interleaved halves.

    Within each subject, even positions form the query half and odd
    positions the database half, so every query subject is represented in
    the database.
    """
    if len(eval_volumes) < 2:
        raise ValueError("accuracy evaluation requires >= 2 subjects")
    queries, database = [], []
    for v in eval_volumes:
        for s in v.slices:
            (queries if s.position % 2 == 0 else database).append(s)
    q = _normalize_rows(embed_slices(encoder, queries))
    d = _normalize_rows(embed_slices(encoder, database))
    top1 = np.argmax(q @ d.T, axis=1)
    hits = [queries[i].subject_id == database[j].subject_id
            for i, j in enumerate(top1)]
    return float(np.mean(hits))


def save_kb(kb: KnowledgeBase, path) -> None:
    """Persist as manifest.json + row-major little-endian float32 matrix."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "embed_dim": kb.embed_dim,
        "rows": kb.embeddings.shape[0],
        "tau": kb.tau,
        "records": kb.records,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    data = np.ascontiguousarray(kb.embeddings, dtype="<f4")
    (path / "embeddings.f32").write_bytes(data.tobytes())


def load_kb(path) -> KnowledgeBase:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "embeddings.f32").read_bytes()
    emb = np.frombuffer(raw, dtype="<f4").reshape(
        manifest["rows"], manifest["embed_dim"]).copy()
    return KnowledgeBase(embeddings=emb, records=manifest["records"],
                         embed_dim=manifest["embed_dim"], tau=manifest["tau"])
