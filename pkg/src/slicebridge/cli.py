"""Command-line entry points tying the pipeline stages together.

Every subcommand reads one ExperimentConfig (JSON file plus flag
overrides), writes its artifacts under a run directory, and emits a
machine-readable summary.  Artifact names are stable so stages compose via
paths alone, and all outputs are byte-reproducible for a fixed config.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import bridge, control, data, gradstats, metrics, pipeline, retrieval
from .config import ExperimentConfig
from .errors import ConfigurationError
from .nets import (ControlBranch, Denoiser, DenoiserSpec, Encoder,
                   EncoderSpec, build_from_checkpoint, save_checkpoint)
from .schedule import build_schedule


def _write_summary(run_dir: Path, command: str, cfg: ExperimentConfig,
                   payload: dict) -> None:
    out = {"command": command, "config_digest": cfg.digest(), **payload}
    (run_dir / f"summary_{command.replace('-', '_')}.json").write_text(
        json.dumps(out, indent=2))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"missing {what}: {path}")
    return path


def _write_trace_csv(path: Path, trace: list[float]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, f"{v:.8f}"])


def _phantom_params(cfg: ExperimentConfig) -> data.PhantomParams:
    return data.PhantomParams(
        n_subjects=cfg.n_subjects,
        slices_per_subject=cfg.slices_per_subject,
        image_size=cfg.image_size,
        families=cfg.families,
        intensity_jitter=cfg.intensity_jitter,
        subject_amp=cfg.subject_amp,
        texture_amp=cfg.texture_amp,
        geom_jitter=cfg.geom_jitter,
    )


def _load_split(run_dir: Path, split: str) -> list:
    return data.load_corpus(_require(run_dir / "data" / split,
                                     f"{split} corpus"))


def cmd_gen_data(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    pairs = data.generate_corpus(_phantom_params(cfg), seed=cfg.seed)
    n_eval = cfg.eval_subjects
    if n_eval:
        train, eval_ = pairs[:-n_eval], pairs[-n_eval:]
    else:
        train, eval_ = pairs, []
    data.save_corpus(train, run_dir / "data" / "train")
    data.save_corpus(eval_, run_dir / "data" / "eval")
    return {"train_subjects": len(train), "eval_subjects": len(eval_)}


def cmd_train_bridge(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    sched = build_schedule(cfg.T, cfg.s)
    x0, y = gradstats.corpus_tensors(train)
    torch.manual_seed(cfg.seed)
    model = Denoiser(DenoiserSpec(image_size=cfg.image_size))
    trace = bridge.train_denoiser(
        model, x0, y, sched, cfg.objective, iters=cfg.bridge_iters,
        batch_size=cfg.bridge_batch, lr=cfg.bridge_lr, seed=cfg.seed,
        eps_const=cfg.eps_const)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_checkpoint(ckpt_dir / "bridge.pt", model, model.spec,
                    {"T": cfg.T, "s": cfg.s, "objective": cfg.objective})
    _write_trace_csv(run_dir / "bridge_loss.csv", trace)
    return {"final_loss": trace[-1], "iterations": len(trace)}


def cmd_train_retriever(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    sources = [src for src, _ in train]
    torch.manual_seed(cfg.seed)
    encoder = Encoder(EncoderSpec(image_size=cfg.image_size))
    trace = retrieval.train_retriever(
        encoder, sources, retrieval.PositiveSpec(cfg.offsets),
        alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam,
        opts=retrieval.TrainOpts(iters=cfg.retriever_iters,
                                 lr=cfg.retriever_lr, seed=cfg.seed))
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_checkpoint(ckpt_dir / "encoder.pt", encoder, encoder.spec, {})
    _write_trace_csv(run_dir / "retriever_loss.csv", trace)
    return {"final_loss": trace[-1], "iterations": len(trace)}


def _load_encoder(run_dir: Path) -> Encoder:
    module, _ = build_from_checkpoint(
        _require(run_dir / "checkpoints" / "encoder.pt", "encoder checkpoint"))
    module.eval()
    return module


def _load_bridge(run_dir: Path):
    path = _require(run_dir / "checkpoints" / "bridge.pt", "bridge checkpoint")
    module, extra = build_from_checkpoint(path)
    module.eval()
    return module, extra


def cmd_build_kb(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    encoder = _load_encoder(run_dir)
    kb = retrieval.build_kb(encoder, [src for src, _ in train])
    if cfg.db_fraction < 1.0:
        rows = max(1, int(round(kb.embeddings.shape[0] * cfg.db_fraction)))
        kb = retrieval.KnowledgeBase(
            embeddings=kb.embeddings[:rows], records=kb.records[:rows],
            embed_dim=kb.embed_dim, tau=kb.tau)
    retrieval.save_kb(kb, run_dir / "kb")
    return {"rows": kb.embeddings.shape[0], "db_fraction": cfg.db_fraction}


def cmd_calibrate_tau(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    encoder = _load_encoder(run_dir)
    kb = retrieval.load_kb(_require(run_dir / "kb", "knowledge base"))
    queries = [s for src, _ in train for s in src.slices]
    tau = retrieval.calibrate_tau(encoder, kb, queries,
                                  percentile_p=cfg.tau_percentile,
                                  mode=cfg.tau_mode)
    retrieval.save_kb(kb, run_dir / "kb")
    return {"tau": tau, "mode": cfg.tau_mode, "p": cfg.tau_percentile}


def cmd_train_control(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    encoder = _load_encoder(run_dir)
    kb = retrieval.load_kb(_require(run_dir / "kb", "knowledge base"))
    model, extra = _load_bridge(run_dir)
    sched = build_schedule(extra["T"], extra["s"])
    pairs, skipped = control.make_control_pairs(
        train, encoder, kb, slerp_augment_prob=cfg.slerp_augment_prob,
        seed=cfg.seed, max_pos_delta=cfg.resolved_max_pos_delta())
    if not pairs:
        raise ConfigurationError("no control training pairs were retrievable")
    torch.manual_seed(cfg.seed)
    branch = ControlBranch.from_denoiser(model)
    trace = control.train_control(
        model, branch, pairs, sched, extra["objective"],
        control.ControlTrainOpts(iters=cfg.control_iters,
                                 batch_size=cfg.control_batch,
                                 lr=cfg.control_lr, seed=cfg.seed))
    save_checkpoint(run_dir / "checkpoints" / "control.pt", branch,
                    branch.spec, {"pairs": len(pairs), "skipped": skipped})
    _write_trace_csv(run_dir / "control_loss.csv", trace)
    return {"pairs": len(pairs), "skipped": skipped, "final_loss": trace[-1]}


def cmd_reconstruct(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    train = _load_split(run_dir, "train")
    eval_ = _load_split(run_dir, "eval")
    encoder = _load_encoder(run_dir)
    kb = retrieval.load_kb(_require(run_dir / "kb", "knowledge base"))
    model, extra = _load_bridge(run_dir)
    sched = build_schedule(extra["T"], extra["s"])
    branch = None
    if cfg.use_control:
        branch, _ = build_from_checkpoint(
            _require(run_dir / "checkpoints" / "control.pt",
                     "control checkpoint"))
        branch.eval()
    store = pipeline.make_slice_store([src for src, _ in train])
    out_dir = run_dir / "recon"
    summaries = {}
    for src, _tgt in eval_:
        sparse = data.sparsify(src, cfg.sparsify_factor)
        plan = pipeline.plan_reconstruction(
            sparse, kb, encoder, range(src.dense_extent), store,
            max_pos_delta=cfg.resolved_max_pos_delta())
        recon = pipeline.reconstruct_volume(
            plan, model, branch, sched, cfg.sample_steps, seed=cfg.seed,
            use_control=cfg.use_control)
        data.save_volume(recon, out_dir / src.subject_id)
        (out_dir / f"plan_{src.subject_id}.json").write_text(
            json.dumps(plan.manifest(), indent=2))
        directives = [e.directive for e in plan.entries]
        summaries[src.subject_id] = {
            d: directives.count(d) for d in set(directives)}
    return {"subjects": summaries, "use_control": cfg.use_control}


def cmd_evaluate(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    eval_ = _load_split(run_dir, "eval")
    out = {}
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(exist_ok=True)
    csv_path = reports_dir / "metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    for _src, tgt in eval_:
        recon_path = _require(run_dir / "recon" / tgt.subject_id,
                              f"reconstruction for {tgt.subject_id}")
        recon = data.load_volume(recon_path)
        report = metrics.evaluate_volumes(recon, tgt)
        report.to_json(reports_dir / f"metrics_{tgt.subject_id}.json")
        report.append_csv(csv_path, label=tgt.subject_id)
        out[tgt.subject_id] = report.csv_row()
    return {"metrics": out}


def cmd_gradstats(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    small = dict(n_subjects=6, slices_per_subject=8,
                 image_size=gradstats.TINY_SPEC.image_size, families=2)
    low = data.generate_corpus(
        data.PhantomParams(intensity_jitter=0.0, **small), seed=cfg.seed)
    high = data.generate_corpus(
        data.PhantomParams(intensity_jitter=1.0, **small), seed=cfg.seed)
    # Small noise scale: the displacement term, where the two objectives
    # differ, has to dominate the schedule noise for the comparison to bite.
    sched = build_schedule(100, 0.05)
    results = gradstats.convergence_experiment(
        high, low, sched, iters=cfg.gradstats_iters, seed=cfg.seed,
        plateau_window=cfg.gradstats_window)
    gs_dir = run_dir / "gradstats"
    gs_dir.mkdir(exist_ok=True)
    with (gs_dir / "traces.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted(results["traces"])
        writer.writerow(["iteration"] + keys)
        for i in range(len(results["traces"][keys[0]])):
            writer.writerow([i] + [f"{results['traces'][k][i]:.8f}"
                                   for k in keys])
    (gs_dir / "plateaus.json").write_text(
        json.dumps(results["plateau"], indent=2))
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, trace in sorted(results["traces"].items()):
        ax.plot(trace, label=k)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(gs_dir / "loss_curves.png", dpi=100)
    plt.close(fig)
    return {"plateau": results["plateau"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-bridge": cmd_train_bridge,
    "train-retriever": cmd_train_retriever,
    "build-kb": cmd_build_kb,
    "calibrate-tau": cmd_calibrate_tau,
    "train-control": cmd_train_control,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "gradstats": cmd_gradstats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slicebridge",
        description="Retrieval-augmented bridge diffusion pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--run-dir", type=Path, default=Path("runs/default"))
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--factor", type=int, default=None,
                        help="sparsification factor override")
    parser.add_argument("--steps", type=int, default=None,
                        help="sampling step count override")
    parser.add_argument("--objective", choices=["raw", "unitized"],
                        default=None)
    parser.add_argument("--no-control", action="store_true")
    parser.add_argument("--tau-mode", choices=["percentile", "top_mean"],
                        default=None)
    parser.add_argument("--db-fraction", type=float, default=None)
    return parser


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.factor is not None:
        cfg.sparsify_factor = args.factor
    if args.steps is not None:
        cfg.sample_steps = args.steps
    if args.objective is not None:
        cfg.objective = args.objective
    if args.no_control:
        cfg.use_control = False
    if args.tau_mode is not None:
        cfg.tau_mode = args.tau_mode
    if args.db_fraction is not None:
        cfg.db_fraction = args.db_fraction
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = (ExperimentConfig.load(args.config) if args.config
               else ExperimentConfig())
        cfg = apply_overrides(cfg, args)
        run_dir = args.run_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        payload = COMMANDS[args.command](cfg, run_dir, args)
        _write_summary(run_dir, args.command, cfg, payload)
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "ok": True, **payload}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
