"""Command-line entry point tying corpora, training, generation,
benchmarking, evaluation and rating fits into reproducible experiment
directories.

Every command is driven by a YAML experiment config plus a few overrides,
takes an exclusive lock on the experiment directory when it mutates it,
and leaves a manifest of what ran.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import torch

import calm.evalbench as evalbench
from calm.config import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    config_hash,
    experiment_lock,
    load_config,
    save_config,
)
from calm.elo import ComparisonRecord, EloError, fit as elo_fit
from calm.heads import HeadError
from calm.model import Model, ModelConfig
from calm.nn import NumericsError
from calm.nn.checkpoint import CheckpointError
from calm.rvq import RvqError, train_codebooks
from calm.sampling import GenerationTrace, SamplerConfig, SamplingError, generate
from calm.sources import (
    Corpus,
    NormStats,
    SourceError,
    load_corpus,
    sample_sequences,
    save_corpus,
)
from calm.training import TrainConfig, TrainError, train
from calm.vae import VaeConfig, WaveformVae, encode_corpus, toy_waveforms, vae_train_step

THREADS_ENV = "CALM_THREADS"

CONFIG_ERRORS = (ConfigError, SourceError, TrainError, SamplingError, HeadError, RvqError, EloError, ValueError)
NUMERIC_ERRORS = (NumericsError,)
IO_ERRORS = (OSError, CheckpointError)


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "corpus": Path(cfg.paths.corpus) if cfg.paths.corpus else out / "corpus.bin",
        "stats": Path(cfg.paths.stats) if cfg.paths.stats else out / "stats.json",
        "checkpoint": Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "model.bin",
        "vae": Path(cfg.paths.vae_checkpoint) if cfg.paths.vae_checkpoint else out / "vae.bin",
        "config_copy": out / "config.yaml",
        "manifest": out / "manifest.json",
        "train_log": out / "train_log.csv",
    }


def _write_csv(path: Path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fieldnames = fieldnames or list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def cmd_make_corpus(cfg: ExperimentConfig) -> int:
    """Sample (or encode) the training corpus and fit normalization stats."""
    paths = _paths(cfg)
    with experiment_lock(paths["out"]):
        manifest = RunManifest.start(cfg, "make-corpus")
        if cfg.source.kind == "toy-vae":
            if not paths["vae"].exists():
                raise ConfigError(f"toy-vae corpus needs a trained autoencoder at {paths['vae']}")
            vae_model, _ = _load_vae(paths["vae"])
            waves = toy_waveforms(
                cfg.source.count,
                n_frames=cfg.source.seq_len,
                window_len=vae_model.config.window_len,
                seed=cfg.seed,
            )
            corpus = encode_corpus(
                vae_model, waves, cfg.source.frame_rate, use_samples=cfg.vae.use_samples, seed=cfg.seed
            )
        else:
            data = sample_sequences(cfg.source.spec(), cfg.source.count, seed=cfg.seed)
            corpus = Corpus(data=data, frame_rate=cfg.source.frame_rate)
        save_corpus(paths["corpus"], corpus)
        if corpus.count > 0:
            stats = NormStats.from_frames(corpus.data)
            stats.save(paths["stats"])
        save_config(cfg, paths["config_copy"])
        manifest.artifacts = {"corpus": str(paths["corpus"]), "stats": str(paths["stats"])}
        manifest.finish(paths["manifest"])
    print(f"corpus: {paths['corpus']} ({corpus.count} sequences of {corpus.seq_len}x{corpus.latent_dim})")
    return 0


def _load_vae(path: Path) -> tuple[WaveformVae, dict]:
    from calm.nn.checkpoint import load_tensors

    tensors = load_tensors(path)
    import json as _json

    meta = _json.loads(bytes(tensors.pop("meta.vae_config").tolist()).decode())
    model = WaveformVae(VaeConfig(**meta))
    state = {k.removeprefix("model."): v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, meta


def cmd_train_vae(cfg: ExperimentConfig) -> int:
    """Fit the toy waveform autoencoder used by the toy-vae source kind."""
    import dataclasses
    import json as _json

    from calm.nn.checkpoint import save_tensors

    paths = _paths(cfg)
    with experiment_lock(paths["out"]):
        manifest = RunManifest.start(cfg, "train-vae")
        torch.manual_seed(cfg.seed)
        vae_cfg = VaeConfig(
            window_len=cfg.vae.window_len,
            latent_dim=cfg.source.latent_dim,
            hidden_dim=cfg.vae.hidden_dim,
            n_layers=cfg.vae.n_layers,
            n_heads=cfg.vae.n_heads,
            kl_weight=cfg.vae.kl_weight,
        )
        model = WaveformVae(vae_cfg)
        waves = toy_waveforms(
            cfg.vae.n_waveforms, n_frames=cfg.source.seq_len, window_len=cfg.vae.window_len, seed=cfg.seed + 1
        )
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.vae.lr)
        gen = torch.Generator().manual_seed(cfg.seed + 2)
        rows = []
        for step in range(cfg.vae.steps):
            idx = torch.randint(0, waves.shape[0], (cfg.vae.batch_size,), generator=gen)
            report = vae_train_step(model, opt, waves[idx], generator=gen)
            if step % max(1, cfg.vae.steps // 20) == 0:
                rows.append({"step": step, **report})
        tensors = {
            "meta.vae_config": torch.frombuffer(
                bytearray(_json.dumps(dataclasses.asdict(vae_cfg)).encode()), dtype=torch.uint8
            ).clone()
        }
        tensors.update({f"model.{k}": v for k, v in model.state_dict().items()})
        save_tensors(paths["vae"], tensors)
        _write_csv(paths["out"] / "vae_log.csv", rows)
        manifest.artifacts = {"vae": str(paths["vae"])}
        manifest.finish(paths["manifest"])
    print(f"vae checkpoint: {paths['vae']} (final loss {rows[-1]['loss']:.5f})")
    return 0


def _build_model(cfg: ExperimentConfig, stats: NormStats, data_norm: torch.Tensor) -> Model:
    torch.manual_seed(cfg.seed)
    model = Model(ModelConfig(backbone=cfg.backbone, head=cfg.head), stats)
    if cfg.head.kind == "rq":
        frames = data_norm.reshape(-1, data_norm.shape[-1])
        books = train_codebooks(
            frames,
            n_levels=cfg.head.rq_levels,
            codebook_size=cfg.head.rq_codebook_size,
            seed=cfg.seed + 3,
        )
        model.head.set_codebooks(books.books)
    return model


def cmd_train(cfg: ExperimentConfig, resume: str | None = None) -> int:
    """Train the configured model on the experiment corpus."""
    paths = _paths(cfg)
    if not paths["corpus"].exists():
        raise ConfigError(f"corpus not found at {paths['corpus']}; run make-corpus first")
    with experiment_lock(paths["out"]):
        manifest = RunManifest.start(cfg, "train")
        corpus = load_corpus(paths["corpus"])
        if corpus.latent_dim != cfg.backbone.latent_dim:
            raise ConfigError(
                f"corpus latent dim {corpus.latent_dim} != backbone latent_dim {cfg.backbone.latent_dim}"
            )
        stats = NormStats.load(paths["stats"]) if paths["stats"].exists() else NormStats.from_frames(corpus.data)
        data_norm = stats.normalize(corpus.data)
        model = _build_model(cfg, stats, data_norm)
        rows: list[dict] = []
        train(
            model,
            data_norm,
            cfg.train,
            log_rows=rows,
            checkpoint_path=paths["checkpoint"],
            resume_from=resume,
        )
        _write_csv(paths["train_log"], rows, ["step", "loss", "lr", "wall_s"])
        save_config(cfg, paths["config_copy"])
        manifest.artifacts = {"checkpoint": str(paths["checkpoint"]), "train_log": str(paths["train_log"])}
        manifest.finish(paths["manifest"])
    print(f"checkpoint: {paths['checkpoint']} ({rows[-1]['loss']:.5f} final loss)" if rows else "done")
    return 0


def _load_model(path: Path) -> Model:
    model, _ = Model.load(path)
    model.eval()
    return model


def cmd_generate(args: argparse.Namespace) -> int:
    """Continue a prompt and write the sequence (and optional trace)."""
    model = _load_model(Path(args.checkpoint))
    if args.head and args.head != model.head_kind:
        raise ConfigError(f"checkpoint holds a {model.head_kind} head, not {args.head}")
    prompt = None
    frame_rate = 25.0
    if args.prompt:
        corpus = load_corpus(args.prompt)
        frame_rate = corpus.frame_rate
        take = corpus.seq_len if args.prompt_frames is None else args.prompt_frames
        prompt = corpus.data[args.prompt_index, :take]
    sampler = SamplerConfig(
        n_steps=args.steps,
        temperature=args.temperature,
        seed=args.seed,
        max_frames=args.frames,
        allow_untrained=args.allow_untrained,
    )
    trace = generate(model, prompt, sampler, frame_rate=frame_rate)
    out = Path(args.out)
    save_corpus(out, Corpus(trace.sequence.frames.unsqueeze(0), frame_rate=frame_rate))
    if args.trace:
        rows = [{"frame": f, "stage": s, "microseconds": us} for f, s, us in trace.csv_rows()]
        _write_csv(Path(args.trace), rows)
    stages = trace.stage_seconds()
    print(
        f"generated {trace.n_generated} frames in {trace.total_seconds():.3f}s "
        f"(sampler {100 * stages['sampler'] / max(trace.total_seconds(), 1e-12):.1f}%, rtf x{trace.rtf:.2f}) -> {out}"
    )
    return 0


def cmd_bench(cfg: ExperimentConfig) -> int:
    """Time the configured systems on shared prompts and render the table."""
    paths = _paths(cfg)
    if not cfg.bench.systems:
        raise ConfigError("bench.systems is empty")
    if not paths["corpus"].exists():
        raise ConfigError(f"corpus not found at {paths['corpus']}")
    corpus = load_corpus(paths["corpus"])
    prompts = corpus.data[:, : cfg.sample.prompt_frames]

    systems = []
    for sys_cfg in cfg.bench.systems:
        model = _load_model(Path(sys_cfg.checkpoint))

        def run(seed: int, model=model, sys_cfg=sys_cfg) -> GenerationTrace:
            prompt = prompts[seed % prompts.shape[0]]
            sampler = SamplerConfig(
                n_steps=sys_cfg.n_steps,
                temperature=sys_cfg.temperature,
                seed=cfg.seed + seed,
                max_frames=cfg.sample.max_frames,
                allow_untrained=True,
            )
            return generate(model, prompt, sampler, frame_rate=corpus.frame_rate)

        systems.append((sys_cfg.name, run))
    report = evalbench.bench(
        systems, baseline=cfg.bench.baseline or systems[0][0], n_runs=cfg.bench.n_runs, n_warmup=cfg.bench.n_warmup
    )
    _write_csv(paths["out"] / "bench.csv", report.csv_rows())
    table = evalbench.render_bench_table(report)
    (paths["out"] / "bench.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_eval(cfg: ExperimentConfig) -> int:
    """Frechet distance against the corpus plus diversity, per system."""
    paths = _paths(cfg)
    if not paths["corpus"].exists():
        raise ConfigError(f"corpus not found at {paths['corpus']}")
    corpus = load_corpus(paths["corpus"])
    embedder = evalbench.Embedder(
        latent_dim=corpus.latent_dim,
        window_len=cfg.eval.window_len,
        embed_dim=cfg.eval.embed_dim,
        seed=cfg.eval.embed_seed,
    )
    ref_emb = embedder.embed_set(corpus.data[: max(cfg.eval.n_generations * 4, 256)])
    from calm.config import BenchSystem

    systems = cfg.bench.systems or [
        BenchSystem(
            name=cfg.head.kind,
            checkpoint=str(paths["checkpoint"]),
            n_steps=cfg.sample.n_steps,
            temperature=cfg.sample.temperature,
        )
    ]
    rows = []
    for sys_cfg in systems:
        model = _load_model(Path(sys_cfg.checkpoint))
        gens = []
        for i in range(cfg.eval.n_generations):
            prompt = corpus.data[i % corpus.count, : cfg.sample.prompt_frames]
            sampler = SamplerConfig(
                n_steps=sys_cfg.n_steps,
                temperature=sys_cfg.temperature,
                seed=cfg.seed + 7000 + i,
                max_frames=cfg.sample.max_frames,
                allow_untrained=True,
            )
            gens.append(generate(model, prompt, sampler, frame_rate=corpus.frame_rate).sequence.frames)
        gen_stack = torch.stack(gens)
        rep = evalbench.frechet_distance(
            embedder.embed_set(gen_stack), ref_emb, n_bootstrap=cfg.eval.n_bootstrap, seed=cfg.seed
        )
        div = evalbench.diversity(embedder.sequence_embeddings(gen_stack))
        rows.append(
            {
                "system": sys_cfg.name,
                "fad": f"{rep.distance:.6f}",
                "fad_ci_low": f"{rep.ci_low:.6f}" if rep.ci_low is not None else "",
                "fad_ci_high": f"{rep.ci_high:.6f}" if rep.ci_high is not None else "",
                "diversity": f"{div:.6f}",
                "n": cfg.eval.n_generations,
            }
        )
    _write_csv(paths["out"] / "eval.csv", rows)
    table = evalbench.render_table(
        ["System", "FAD", "95% CI", "Diversity"],
        [[r["system"], r["fad"], f"[{r['fad_ci_low']}, {r['fad_ci_high']}]", r["diversity"]] for r in rows],
    )
    (paths["out"] / "eval.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_elo(args: argparse.Namespace) -> int:
    """Fit ratings from a comparison CSV (system_a,system_b,outcome rows)."""
    path = Path(args.records)
    if not path.exists():
        raise ConfigError(f"records file not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"system_a", "system_b", "outcome"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(f"records file must have columns {sorted(required)}")
        for row in reader:
            records.append(
                ComparisonRecord(system_a=row["system_a"], system_b=row["system_b"], outcome=row["outcome"])
            )
    ratings = elo_fit(records, alpha0=args.alpha, beta0=args.beta, c=args.center, iters=args.iters)
    rows = [
        [r.system, f"{r.strength:.6f}", f"{r.elo:.1f}", f"{r.ci_low:.1f}", f"{r.ci_high:.1f}"]
        for r in sorted(ratings, key=lambda r: -r.elo)
    ]
    table = evalbench.render_table(["System", "S", "E", "ci_low", "ci_high"], rows)
    print(table, end="")
    if args.out:
        _write_csv(
            Path(args.out),
            [dict(zip(["system", "S", "E", "ci_low", "ci_high"], row)) for row in rows],
        )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """Merge bench and eval CSVs into one aligned comparison table."""
    bench_rows = _read_csv(Path(args.bench)) if args.bench else []
    eval_rows = _read_csv(Path(args.eval)) if args.eval else []
    if not bench_rows and not eval_rows:
        raise ConfigError("report needs at least one of --bench/--eval inputs")
    for name, rows, need in (
        ("bench", bench_rows, {"system", "overall_speedup", "sampler_speedup", "pct_time_in_sampler", "rtf"}),
        ("eval", eval_rows, {"system", "fad", "diversity"}),
    ):
        if rows:
            missing = need - set(rows[0])
            if missing:
                raise ConfigError(f"{name} input is missing column(s) {sorted(missing)}")
    by_system: dict[str, dict] = {}
    order: list[str] = []
    for row in bench_rows + eval_rows:
        if row["system"] not in by_system:
            by_system[row["system"]] = {}
            order.append(row["system"])
        by_system[row["system"]].update(row)
    headers = ["System", "Overall Speedup", "Sampler Speedup", "% Time in Sampler", "RTF", "FAD", "Diversity"]
    table_rows = []
    for name in order:
        row = by_system[name]
        fad = row.get("fad", "")
        if fad and row.get("fad_ci_low"):
            fad = f"{fad} [{row['fad_ci_low']}, {row['fad_ci_high']}]"
        table_rows.append(
            [
                name,
                f"x{float(row['overall_speedup']):.2f}" if "overall_speedup" in row else "-",
                f"x{float(row['sampler_speedup']):.2f}" if "sampler_speedup" in row else "-",
                f"{float(row['pct_time_in_sampler']):.1f}%" if "pct_time_in_sampler" in row else "-",
                f"x{float(row['rtf']):.2f}" if "rtf" in row else "-",
                fad or "-",
                row.get("diversity", "-"),
            ]
        )
    table = evalbench.render_table(headers, table_rows)
    print(table, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    return 0


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("make-corpus", "train-vae", "bench", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)

    p_train = sub.add_parser("train")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="resume from a training checkpoint")

    p_gen = sub.add_parser("generate")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--head", choices=["consistency", "trigflow", "rq"], default=None)
    p_gen.add_argument("--steps", type=int, default=1)
    p_gen.add_argument("--temperature", type=float, default=1.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--prompt", default=None, help="corpus file supplying the prompt")
    p_gen.add_argument("--prompt-index", type=int, default=0)
    p_gen.add_argument("--prompt-frames", type=int, default=None)
    p_gen.add_argument("--frames", type=int, default=64, help="total frames including the prompt")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--trace", default=None, help="write per-frame stage timings CSV")
    p_gen.add_argument("--allow-untrained", action="store_true")

    p_elo = sub.add_parser("elo")
    elo_sub = p_elo.add_subparsers(dest="elo_command", required=True)
    p_fit = elo_sub.add_parser("fit")
    p_fit.add_argument("records")
    p_fit.add_argument("--alpha", type=float, default=0.1)
    p_fit.add_argument("--beta", type=float, default=0.1)
    p_fit.add_argument("--center", type=float, default=2000.0)
    p_fit.add_argument("--iters", type=int, default=30)
    p_fit.add_argument("--out", default=None)

    p_rep = sub.add_parser("report")
    p_rep.add_argument("--bench", default=None)
    p_rep.add_argument("--eval", default=None)
    p_rep.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    if os.environ.get(THREADS_ENV):
        try:
            torch.set_num_threads(int(os.environ[THREADS_ENV]))
        except ValueError:
            print(f"warning: ignoring non-integer {THREADS_ENV}", file=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "make-corpus":
            return cmd_make_corpus(load_config(args.config))
        if args.command == "train-vae":
            return cmd_train_vae(load_config(args.config))
        if args.command == "train":
            return cmd_train(load_config(args.config), resume=args.resume)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "bench":
            return cmd_bench(load_config(args.config))
        if args.command == "eval":
            return cmd_eval(load_config(args.config))
        if args.command == "elo":
            return cmd_elo(args)
        if args.command == "report":
            return cmd_report(args)
        parser.error(f"unknown command {args.command}")
    except NUMERIC_ERRORS as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except IO_ERRORS as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 4
    except CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
