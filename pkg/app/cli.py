"""
Command-line entry point: corpus generation, training, evaluation, benchmarking and plot data
"""
import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch
import typer

from app.config import RunConfig, load_run_config, settings
from app.errors import ConfigurationError, PlannerError, StorageError
from app.models.configs import CHAIN_ROWS, ChainConfig
from app.models.scene import Scene
from app.services.bench_service import bench_chain
from app.services.denoiser_service import build_model
from app.services.evaluation_service import evaluate_corpus, plot_data, sweep
from app.services.reward_service import RewardScorer
from app.services.rl_service import rl_train_loop
from app.services.scene_service import generate_corpus
from app.services.sft_service import SFTTrainer
from app.services.storage_service import storage_service
from app.utils.logging_setup import configure_logging
from app.utils.seeding import RngHierarchy
from app.utils.validators import ensure_output_dir

logger = logging.getLogger(__name__)

cli = typer.Typer(help="Reflective masked-diffusion trajectory planner", no_args_is_help=True)

SeedOpt = typer.Option(None, "--seed", help="Root seed (overrides the config file)")
OutOpt = typer.Option(None, "--out", help="Output directory")
ConfigOpt = typer.Option(None, "--config", help="RunConfig file (.toml or .json)")
CkptOpt = typer.Option(None, "--ckpt", help="Checkpoint file")


def guarded(func):
    """Print '<category>: <message>' on stderr and exit nonzero on planner errors"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except PlannerError as e:
            logger.error(f"{func.__name__} failed: {e}")
            typer.echo(f"{e.category}: {e}", err=True)
            raise typer.Exit(code=2 if isinstance(e, ConfigurationError) else 1)

    return wrapper


def _setup(config: Optional[str], seed: Optional[int], out: Optional[str]) -> RunConfig:
    configure_logging()
    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out_dir"] = out
    run = load_run_config(config, **overrides)
    ensure_output_dir(run.out_dir)
    return run


def _corpus_path(run: RunConfig, split: str, given: Optional[str]) -> Path:
    """``--scenes`` path when given, else <out>/corpus_<split>.jsonl"""
    return Path(given) if given else Path(run.out_dir) / f"corpus_{split}.jsonl"


def _load_scenes(path: Path, limit: Optional[int] = None) -> List[Scene]:
    if not path.exists():
        raise StorageError(f"corpus not found: {path} (run gen-data first)")
    _, scenes = storage_service.load_corpus(path)
    return scenes[:limit] if limit else scenes


def corpus_seeds(seed: int, n_train: int, n_test: int):
    """Disjoint, deterministic train and test scene seeds"""
    base = RngHierarchy(seed).int_seed("corpus") % (1 << 31)
    return list(range(base, base + n_train)), list(range(base + n_train, base + n_train + n_test))


@cli.command("gen-data")
@guarded
def gen_data(
    n_scenes: int = typer.Option(2000, "--n-scenes", min=0, help="Training scenes"),
    n_test_scenes: int = typer.Option(200, "--n-test-scenes", min=0, help="Held-out scenes"),
    scenes: Optional[str] = typer.Option(None, "--scenes", help="Training corpus to write (default <out>/corpus_train.jsonl)"),
    test_scenes: Optional[str] = typer.Option(None, "--test-scenes", help="Test corpus to write (default <out>/corpus_test.jsonl)"),
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    config: Optional[str] = ConfigOpt,
):
    """Generate the train and test scene corpora"""
    run = _setup(config, seed, out)
    train_seeds, test_seeds = corpus_seeds(run.seed, n_scenes, n_test_scenes)
    for split, seeds, given in (("train", train_seeds, scenes), ("test", test_seeds, test_scenes)):
        corpus = generate_corpus(seeds, run.scene, run.vocab)
        header = storage_service.header(
            "corpus", run, split=split, n_scenes=len(corpus), n_train=n_scenes, n_test=n_test_scenes
        )
        storage_service.save_corpus(_corpus_path(run, split, given), corpus, header)
    typer.echo(f"wrote {n_scenes} train / {n_test_scenes} test scenes")


@cli.command("train-sft")
@guarded
def train_sft(
    scenes: Optional[str] = typer.Option(None, "--scenes", help="Training corpus (default <out>/corpus_train.jsonl)"),
    n_scenes: Optional[int] = typer.Option(None, "--n-scenes", min=1, help="Use only the first N scenes"),
    steps: Optional[int] = typer.Option(None, "--steps", min=0, help="Override train.steps"),
    ckpt: Optional[str] = typer.Option(None, "--ckpt", help="Resume from this checkpoint"),
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    config: Optional[str] = ConfigOpt,
):
    """Supervised training: masked drafting, structure-aware correction, field loss"""
    run = _setup(config, seed, out)
    train_scenes = _load_scenes(_corpus_path(run, "train", scenes), n_scenes)
    start_step = 0
    if ckpt:
        checkpoint = storage_service.load_checkpoint(ckpt)
        model = checkpoint.model
        start_step = checkpoint.step
    else:
        model = build_model(run.model, run.vocab, seed=RngHierarchy(run.seed).int_seed("init"))
    trainer = SFTTrainer(model, train_scenes, run.train, run.perturb, run.scene, run.seed, start_step=start_step)
    if ckpt and checkpoint.optimizer_state:
        trainer.optimizer.load_state_dict(checkpoint.optimizer_state)

    out_dir = Path(run.out_dir)
    total = run.train.steps if steps is None else steps
    rows: List[dict] = []
    while trainer.step < start_step + total:
        chunk = min(run.train.checkpoint_every, start_step + total - trainer.step)
        trainer.run(chunk, rows)
        if trainer.step < start_step + total:
            storage_service.save_checkpoint(out_dir / "sft.pt", model, trainer.optimizer, trainer.step, run)
    digest = storage_service.save_checkpoint(out_dir / "sft.pt", model, trainer.optimizer, trainer.step, run)
    storage_service.write_records(out_dir / "sft_log.jsonl", storage_service.header("sft_log", run, digest), rows)
    typer.echo(f"sft finished at step {trainer.step}")


@cli.command("train-rl")
@guarded
def train_rl(
    ckpt: str = typer.Option(..., "--ckpt", help="SFT checkpoint"),
    scenes: Optional[str] = typer.Option(None, "--scenes", help="Training corpus (default <out>/corpus_train.jsonl)"),
    n_scenes: Optional[int] = typer.Option(None, "--n-scenes", min=1, help="Use only the first N scenes"),
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    config: Optional[str] = ConfigOpt,
):
    """Reinforcement fine-tuning over composed draft-and-edit rollouts"""
    run = _setup(config, seed, out)
    train_scenes = _load_scenes(_corpus_path(run, "train", scenes), n_scenes)
    checkpoint = storage_service.load_checkpoint(ckpt)
    model, rows = rl_train_loop(
        train_scenes, checkpoint.model, run.rl, run.pipeline, run.seed, scorer=RewardScorer(run.reward)
    )
    out_dir = Path(run.out_dir)
    digest = storage_service.save_checkpoint(out_dir / "rl.pt", model, None, checkpoint.step, run)
    header = storage_service.header("rl_log", run, digest, source_checkpoint=checkpoint.checkpoint_hash)
    storage_service.write_records(out_dir / "rl_log.jsonl", header, rows)
    typer.echo(f"rl finished after {run.rl.epochs} epoch(s)")


@cli.command("eval")
@guarded
def eval_cmd(
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint to evaluate"),
    scenes: Optional[str] = typer.Option(None, "--scenes", help="Test corpus (default <out>/corpus_test.jsonl)"),
    n_scenes: Optional[int] = typer.Option(None, "--n-scenes", min=1, help="Use only the first N scenes"),
    best_of: int = typer.Option(2, "--best-of", min=0, help="Drafts per goal for the oracle (0 disables)"),
    sweep_param: Optional[str] = typer.Option(None, "--sweep", help="Pipeline parameter to sweep"),
    values: Optional[str] = typer.Option(None, "--values", help="Comma-separated sweep values"),
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    config: Optional[str] = ConfigOpt,
):
    """Single, best-of-N and AutoEdit-ablation evaluation, optionally with a sweep"""
    run = _setup(config, seed, out)
    test_scenes = _load_scenes(_corpus_path(run, "test", scenes), n_scenes)
    checkpoint = storage_service.load_checkpoint(ckpt)
    scorer = RewardScorer(run.reward)
    out_dir = Path(run.out_dir)
    reports, summary = evaluate_corpus(test_scenes, checkpoint.model, run.pipeline, best_of or None, scorer=scorer)
    header = storage_service.header(
        "eval", run, checkpoint.checkpoint_hash, summary=summary.model_dump(mode="json"), edit_gain=summary.edit_gain
    )
    storage_service.write_records(out_dir / "eval.jsonl", header, reports)
    typer.echo(
        f"single {summary.single.aggregate:.2f} | pre-edit {summary.single_pre_edit.aggregate:.2f}"
        + (f" | best-of-{run.pipeline.n_goals * best_of} {summary.oracle.aggregate:.2f}" if summary.oracle else "")
    )
    if sweep_param:
        if not values:
            raise ConfigurationError("--sweep needs --values")
        try:
            points = [float(v) for v in values.split(",")]
        except ValueError as e:
            raise ConfigurationError(f"bad --values {values!r}") from e
        if sweep_param in ("draft_steps", "edit_steps", "n_goals"):
            points = [int(p) for p in points]
        rows = sweep(test_scenes, checkpoint.model, run.pipeline, sweep_param, points, max(best_of, 1), scorer)
        storage_service.write_records(
            out_dir / f"sweep_{sweep_param}.jsonl", storage_service.header("sweep", run, checkpoint.checkpoint_hash), rows
        )


@cli.command("bench")
@guarded
def bench(
    ckpt: str = typer.Option(..., "--ckpt", help="Action-expert checkpoint"),
    full_width_ckpt: Optional[str] = typer.Option(None, "--full-width-ckpt", help="Full-width checkpoint for the rows before action_expert"),
    chain: Optional[str] = typer.Option(None, "--chain", help=f"Comma-separated rows from {','.join(CHAIN_ROWS)}"),
    warmup: Optional[int] = typer.Option(None, "--warmup", min=0),
    iters: Optional[int] = typer.Option(None, "--iters", min=1),
    scenes: Optional[str] = typer.Option(None, "--scenes", help="Test corpus (default <out>/corpus_test.jsonl)"),
    n_scenes: int = typer.Option(20, "--n-scenes", min=1, help="Scenes planned per iteration"),
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    config: Optional[str] = ConfigOpt,
):
    """Latency and quality of each step of the runtime optimization chain"""
    run = _setup(config, seed, out)
    updates = {}
    if chain:
        updates["rows"] = [r.strip() for r in chain.split(",") if r.strip()]
    if warmup is not None:
        updates["warmup"] = warmup
    if iters is not None:
        updates["iters"] = iters
    try:
        chain_cfg = ChainConfig(**{**run.chain.model_dump(), **updates})
    except ValueError as e:
        raise ConfigurationError(str(e)) from e
    test_scenes = _load_scenes(_corpus_path(run, "test", scenes), n_scenes)
    checkpoint = storage_service.load_checkpoint(ckpt)
    full_width = storage_service.load_checkpoint(full_width_ckpt).model if full_width_ckpt else None
    clip_seeds = [test_scenes[0].seed] if test_scenes else [run.seed]
    report = bench_chain(
        test_scenes, checkpoint.model, chain_cfg, run.pipeline, run.scene, full_width, clip_seeds, RewardScorer(run.reward)
    )
    out_dir = Path(run.out_dir)
    header = storage_service.header("chain", run, checkpoint.checkpoint_hash, quality_gate=report.quality_gate)
    storage_service.write_records(out_dir / "chain.jsonl", header, report.rows)
    timing_rows = [
        {"row": name, "iteration": i, "prefill_ms": p, "decode_ms": d}
        for name, series in report.timings.items()
        for i, (p, d) in enumerate(series)
    ]
    storage_service.write_records(
        out_dir / "chain_timings.jsonl", storage_service.header("chain_timings", run, checkpoint.checkpoint_hash), timing_rows
    )
    for row in report.rows:
        gate = "ok" if row.within_gate else "OUT OF GATE"
        typer.echo(
            f"{row.name:>14}  prefill {row.prefill_ms_mean:8.2f} ms  decode {row.decode_ms_mean:8.2f} ms  "
            f"reward {row.reward_mean:6.2f} ({row.reward_delta:+.2f}, {gate})"
        )


@cli.command("plot-data")
@guarded
def plot_data_cmd(
    reports: Optional[List[str]] = typer.Argument(None, help="Report files (eval, sweep, chain, logs)"),
    out: Optional[str] = OutOpt,
):
    """Emit one plot-ready series file per figure plus a manifest"""
    configure_logging()
    out_dir = Path(out or settings.default_out_dir) / "series"
    written = plot_data(reports or [], out_dir)
    typer.echo(f"wrote {len(written)} series to {out_dir}")


@cli.command("serve")
@guarded
def serve(
    ckpt: Optional[str] = CkptOpt,
    host: str = typer.Option("127.0.0.1", "--host"),
    port: int = typer.Option(8000, "--port"),
):
    """Serve the planning API"""
    import uvicorn

    if ckpt:
        settings.checkpoint_path = ckpt
    uvicorn.run("app.main:app", host=host, port=port)


def main():
    cli()


if __name__ == "__main__":
    sys.exit(main())
