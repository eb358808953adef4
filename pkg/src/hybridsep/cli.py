"""Command-line interface: synth-data, train-stage1, train-stage2,
separate, evaluate, inspect.

Every command is deterministic given ``--seed`` and writes its resolved
config next to its outputs. Exit codes: 0 success, 2 usage or config
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from .act import NumericalAbort, make_schedules
from .checkpoint import check_fingerprint, load_checkpoint, save_checkpoint
from .config import RunConfig, make_config
from .dsp import Waveform, read_wav, resample, write_wav
from .pipeline import (build_aet, build_asm, build_cd, build_disc, build_fe,
                       build_stage2, build_suite, prepare_stage2_data,
                       separate_with_embedding, stage1_examples)
from .stage1 import predict_embedding, stage1_train

DB_FLOOR = -80.0  # spectrogram colour scale: [DB_FLOOR, 0] dB re full scale


def cache_dir() -> Path:
    root = os.environ.get("HYBRIDSEP_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "hybridsep"


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = make_config(args.preset, seed=args.seed)
    cfg.seed = args.seed
    for override in getattr(args, "set", None) or []:
        key, _, value = override.partition("=")
        if not value:
            raise ValueError(f"--set expects key=value, got {override!r}")
        cfg.override(key, value)
    return cfg


def _write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")


def _load_corpus_examples(corpus: Path, cfg: RunConfig) -> list[data_mod.MixtureExample]:
    manifest = corpus / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    rows = data_mod.read_manifest(manifest)
    examples = []
    for row in rows:
        mixture = _read_at_rate(corpus / row["mixture"], cfg.dsp.sample_rate)
        target = _read_at_rate(corpus / row["target"], cfg.dsp.sample_rate)
        examples.append(data_mod.MixtureExample(
            mixture=mixture, target=target, query=row["query"],
            query_kind=row["kind"], snr_db=row["snr_db"],
            component_keywords=row["keywords"], pool=row.get("pool", row["kind"]),
            example_id=row["id"],
        ))
    return examples


def _read_at_rate(path: Path, rate: int) -> Waveform:
    wave = read_wav(path)
    if wave.sample_rate != rate:
        wave = resample(wave, rate)
    return wave


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    if args.out:
        out_dir = Path(args.out)
    else:
        out_dir = (cache_dir() / "corpora" /
                   f"{args.kind}-n{args.n}-seed{cfg.seed}-"
                   f"r{cfg.dsp.sample_rate}-c{cfg.data.chunk_seconds}")
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists() and not args.out:
        print(f"cache hit: {manifest}")
        return 0
    examples = data_mod.synth_corpus(
        args.n, args.kind, cfg.data.chunk_seconds, cfg.dsp.sample_rate, cfg.seed,
        cfg.data.keyword_components_min, cfg.data.keyword_components_max,
    )
    data_mod.write_corpus(out_dir, examples)
    _write_resolved_config(cfg, out_dir)
    print(f"wrote {len(examples)} examples to {out_dir}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_config(args)
    corpus = Path(args.corpus)
    examples = _load_corpus_examples(corpus, cfg)
    out_dir = Path(args.out)
    _write_resolved_config(cfg, out_dir)
    suite = build_suite(cfg)
    torch.manual_seed(cfg.seed)
    fe = build_fe(cfg)
    aet = build_aet(cfg)

    log_path = out_dir / "stage1_metrics.jsonl"
    with open(log_path, "w") as log:
        def log_fn(step, loss):
            log.write(json.dumps({"step": step, "L1": loss}) + "\n")
            print(f"step {step}: L1 {loss:.5f}")

        losses = stage1_train(
            aet, fe, suite, stage1_examples(examples), steps=args.steps,
            lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
            weight_decay=cfg.train.weight_decay,
            batch_size=min(cfg.train.batch_size * 2, len(examples)),
            seed=cfg.seed, log_fn=log_fn,
        )
    save_checkpoint(
        out_dir / "stage1.pt", "stage1", cfg.to_dict(),
        {"fe": fe.state_dict(), "aet": aet.state_dict()},
        suite.fingerprint(), step=args.steps,
    )
    if losses:
        print(f"final L1 loss: {losses[-1]:.5f}")
    print(f"stage-1 checkpoint: {out_dir / 'stage1.pt'}")
    return 0


def _save_stage2(out_dir: Path, cfg: RunConfig, state, fingerprint: str) -> None:
    payload = {
        "asm": state.asm.state_dict(),
        "cd": state.cd.state_dict(),
        "disc": state.disc.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "opt_disc": state.opt_disc.state_dict(),
        "rng": state.rng_state(),
    }
    save_checkpoint(out_dir / "stage2.pt", "stage2", cfg.to_dict(), payload,
                    fingerprint, step=state.step)


def cmd_train_stage2(args) -> int:
    from .act import act_train

    cfg = _load_config(args)
    corpus = Path(args.corpus)
    examples = _load_corpus_examples(corpus, cfg)
    out_dir = Path(args.out)
    _write_resolved_config(cfg, out_dir)
    suite = build_suite(cfg)
    asm, cd, disc, state = build_stage2(cfg)
    if args.resume:
        blob = load_checkpoint(args.resume, expect_kind="stage2")
        check_fingerprint(blob, suite.fingerprint(), args.resume)
        state.asm.load_state_dict(blob["payload"]["asm"])
        state.cd.load_state_dict(blob["payload"]["cd"])
        state.disc.load_state_dict(blob["payload"]["disc"])
        state.opt_gen.load_state_dict(blob["payload"]["opt_gen"])
        state.opt_disc.load_state_dict(blob["payload"]["opt_disc"])
        state.load_rng_state(blob["payload"]["rng"])
        state.step = blob["step"]

    batch_data = prepare_stage2_data(examples, suite)
    schedules = make_schedules(cfg.train, total_steps=state.step + args.steps)
    act_train(
        state, batch_data, schedules, steps=args.steps,
        batch_size=cfg.train.batch_size,
        metrics_path=out_dir / "stage2_metrics.jsonl",
        checkpoint_every=cfg.train.checkpoint_every,
        checkpoint_fn=lambda s: _save_stage2(out_dir, cfg, s, suite.fingerprint()),
        log_every=args.log_every,
        log_fn=lambda r: print(
            f"step {r['step']}: L_T {r['L_T']:.4f} L_L1 {r['L_L1']:.4f} "
            f"L_adv {r['L_adv']:.4f} L_D {r['L_D']:.4f}"
        ),
    )
    print(f"stage-2 checkpoint: {out_dir / 'stage2.pt'}")
    return 0


def cmd_separate(args) -> int:
    blob2 = load_checkpoint(args.stage2, expect_kind="stage2")
    cfg = RunConfig.from_dict(blob2["config"])
    suite = build_suite(cfg)
    check_fingerprint(blob2, suite.fingerprint(), args.stage2)
    asm = build_asm(cfg)
    asm.load_state_dict(blob2["payload"]["asm"])
    asm.eval()

    mixture = _read_at_rate(Path(args.mixture), cfg.dsp.sample_rate)
    if args.embedding_from:
        # Oracle-embedding mode: encode the reference audio directly.
        ref = _read_at_rate(Path(args.embedding_from), cfg.dsp.sample_rate)
        embedding = suite.encode_audio(ref).values
    else:
        if not args.query:
            raise ValueError("--query is required unless --embedding-from is given")
        if not args.stage1:
            raise ValueError("--stage1 checkpoint is required for text queries")
        blob1 = load_checkpoint(args.stage1, expect_kind="stage1")
        check_fingerprint(blob1, suite.fingerprint(), args.stage1)
        fe = build_fe(cfg)
        aet = build_aet(cfg)
        fe.load_state_dict(blob1["payload"]["fe"])
        aet.load_state_dict(blob1["payload"]["aet"])
        fe.eval()
        aet.eval()
        embedding = predict_embedding(aet, fe, suite, args.query, mixture).values

    estimate = separate_with_embedding(asm, suite, mixture, embedding)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, estimate)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    corpus = Path(args.corpus)
    examples = _load_corpus_examples(corpus, cfg)
    est_dir = Path(args.estimates)
    suite = build_suite(cfg)

    rows = []
    est_embs = []
    tgt_embs = []
    for ex in examples:
        est_path = est_dir / f"{ex.example_id}.wav"
        if not est_path.exists():
            raise FileNotFoundError(f"missing estimate {est_path}")
        est = _read_at_rate(est_path, cfg.dsp.sample_rate)
        if len(est) != len(ex.target):
            raise ValueError(
                f"{est_path}: length {len(est)} != target {len(ex.target)}"
            )
        rows.append({
            "id": ex.example_id,
            "sdr": metrics_mod.sdr(ex.target, est),
            "sdri": metrics_mod.sdri(ex.target, est, ex.mixture),
            "clap_score": metrics_mod.clap_score(est, ex.query, suite),
            "clap_score_a": metrics_mod.clap_score_a(est, ex.target, suite),
        })
        est_embs.append(suite.encode_audio(est).values)
        tgt_embs.append(suite.encode_audio(ex.target).values)

    aggregate = {
        key: float(np.mean([r[key] for r in rows]))
        for key in ("sdr", "sdri", "clap_score", "clap_score_a")
    }
    fad_value = metrics_mod.fad(est_embs, tgt_embs) if len(rows) >= 2 else None
    report = {"n": len(rows), "per_example": rows, "aggregate": aggregate,
              "fad": fad_value}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))

    print(f"{'id':<16}{'SDR':>9}{'SDRi':>9}{'CLAP':>9}{'CLAPa':>9}")
    for r in rows:
        print(f"{r['id']:<16}{r['sdr']:>9.2f}{r['sdri']:>9.2f}"
              f"{r['clap_score']:>9.2f}{r['clap_score_a']:>9.2f}")
    print(f"{'mean':<16}{aggregate['sdr']:>9.2f}{aggregate['sdri']:>9.2f}"
          f"{aggregate['clap_score']:>9.2f}{aggregate['clap_score_a']:>9.2f}")
    if fad_value is not None:
        print(f"FAD: {fad_value:.4f}")
    print(f"report: {out}")
    return 0


def _spectrogram_db(wave: Waveform) -> np.ndarray:
    import torch as _torch

    from .dsp import stft

    spec = stft(_torch.from_numpy(np.asarray(wave.samples, dtype=np.float64)),
                512, 128)
    mag = spec.abs().numpy().T  # [bins, frames]
    return 20.0 * np.log10(np.maximum(mag / 256.0, 10 ** (DB_FLOOR / 20.0)))


def cmd_inspect(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _load_config(args)
    corpus = Path(args.corpus)
    examples = _load_corpus_examples(corpus, cfg)
    if args.ids:
        wanted = set(args.ids.split(","))
        examples = [e for e in examples if e.example_id in wanted]
        if not examples:
            raise ValueError(f"no corpus examples match ids {sorted(wanted)}")
    else:
        examples = examples[: args.limit]
    est_dir = Path(args.estimates) if args.estimates else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    for ex in examples:
        panels = [("mixture", ex.mixture), ("target", ex.target)]
        if est_dir is not None:
            est_path = est_dir / f"{ex.example_id}.wav"
            if est_path.exists():
                panels.append(("estimate", _read_at_rate(est_path, cfg.dsp.sample_rate)))
        fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2),
                                 squeeze=False)
        for ax, (title, wave) in zip(axes[0], panels):
            img = ax.imshow(_spectrogram_db(wave), origin="lower", aspect="auto",
                            vmin=DB_FLOOR, vmax=0.0, cmap="magma")
            ax.set_title(f"{ex.example_id}: {title}")
            ax.set_xlabel("frame")
            ax.set_ylabel("bin")
        fig.colorbar(img, ax=axes[0], label="dB re full scale")
        fig.savefig(out_dir / f"{ex.example_id}.png", dpi=100,
                    bbox_inches="tight")
        plt.close(fig)
    print(f"wrote {len(examples)} figure(s) to {out_dir}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", choices=["desk", "paper-full"])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. --set train.lr=2e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridsep",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic paired corpus")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kind", choices=["keyword", "caption"], default="keyword")
    p.add_argument("--out", default=None,
                   help="output dir (default: HYBRIDSEP_CACHE corpus cache)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-stage1", help="train the embedding predictor")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the separator with ACT")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--resume", default=None, help="stage-2 checkpoint to resume")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("separate", help="separate one mixture by text query")
    p.add_argument("--mixture", required=True)
    p.add_argument("--query", default=None)
    p.add_argument("--stage1", default=None)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedding-from", default=None,
                   help="WAV whose audio embedding replaces the stage-1 "
                        "prediction (oracle-embedding mode)")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score estimates against a manifest")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--estimates", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="emit spectrogram figures")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--estimates", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", default=None, help="comma-separated example ids")
    p.add_argument("--limit", type=int, default=4)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, default=str), file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
