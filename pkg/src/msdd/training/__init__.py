"""
Two-phase transfer learning: episodic base training on the common classes,
then balanced few-shot fine-tuning with the feature extractor frozen. Also
the single-phase joint-training baseline.
"""
import csv
import logging
from pathlib import Path
from typing import Callable, List, Optional

import typer
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from msdd.config_models import Phase, PhaseConfig
from msdd.model import MSDDModel
from msdd.synthgen import CorpusSplit, load_corpus, resolve_split
from msdd.training.checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore_trainer,
    save_checkpoint,
    trainer_checkpoint,
)
from msdd.training.deploy import DeployedModel, Detection, deploy, detect
from msdd.training.episodes import (
    EpisodeError,
    EpisodeMetrics,
    Task,
    Trainer,
    sample_joint_task,
    sample_task,
)
from msdd.utils import (
    archive_config,
    attach_run_log,
    config_fingerprint,
    detach_run_log,
    load_run_config,
    one_line,
    prepare_output_dir,
)

console = Console()

EpisodeHook = Optional[Callable[[Trainer, EpisodeMetrics], None]]
CHECKPOINT_FILE = "checkpoint.msdd"
MODEL_FILE = "model.msdd"
LOSS_LOG = "loss_log.csv"
LOSS_COLUMNS = ["episode", "loss", "L_loc", "L_cla"]

# -----------------------------------------------------------------------------
# Phases
# -----------------------------------------------------------------------------


def base_train(
    model: MSDDModel,
    split: CorpusSplit,
    cfg: PhaseConfig,
    trainer: Optional[Trainer] = None,
    on_episode: EpisodeHook = None,
) -> Trainer:
    """Episodic training on the common classes, every parameter group trainable.

    :raises ValueError: when the base split holds a rare-class image
    :raises RuntimeError: when a rare-class image was drawn
    """
    logger = logging.getLogger("BaseTraining")
    if cfg.phase != Phase.BASE:
        raise ValueError(f"Base training needs a {Phase.BASE.name} phase config, got {cfg.phase.name}.")
    rare = sorted({image.id for image in split.base if image.class_id in split.rare_classes})
    if rare:
        raise ValueError(f"The base split holds rare-class images: {', '.join(rare[:5])}.")

    model.freeze_extractor(False)
    pools = {c: images for c, images in split.by_class(split.base).items() if c in split.common_classes}
    trainer = trainer if trainer is not None else Trainer(model, cfg)
    logger.info(f"Training on classes {split.common_classes} for {cfg.episodes} episodes")
    trainer.train(lambda rng: sample_task(pools, split.common_classes, cfg.s, cfg.q, rng), cfg.episodes, on_episode)

    rare_ids = {image.id for image in split.full if image.class_id in split.rare_classes}
    if trainer.touched & rare_ids:
        raise RuntimeError(f"Base training drew rare-class images: {sorted(trainer.touched & rare_ids)[:5]}.")
    return trainer


def finetune(
    model: MSDDModel,
    split: CorpusSplit,
    cfg: PhaseConfig,
    trainer: Optional[Trainer] = None,
    on_episode: EpisodeHook = None,
) -> DeployedModel:
    """Balanced episodes over every class with the extractor frozen, then deployment.

    :raises ValueError: when the phase config leaves the extractor trainable
    """
    logger = logging.getLogger("FineTuning")
    if cfg.phase != Phase.FINETUNE:
        raise ValueError(f"Fine-tuning needs a {Phase.FINETUNE.name} phase config, got {cfg.phase.name}.")
    if not cfg.freeze_extractor:
        raise ValueError("Fine-tuning requires freeze_extractor: the feature extractor must stay frozen.")

    model.freeze_extractor(True)
    classes = sorted(split.common_classes + split.rare_classes)
    pools = split.by_class(split.full)
    trainer = trainer if trainer is not None else Trainer(model, cfg)
    logger.info(f"Fine-tuning on classes {classes} for {cfg.episodes} episodes")
    trainer.train(lambda rng: sample_task(pools, classes, cfg.s, cfg.q, rng), cfg.episodes, on_episode)
    return deploy(model, split, cfg)


def joint_train(
    model: MSDDModel,
    split: CorpusSplit,
    cfg: PhaseConfig,
    trainer: Optional[Trainer] = None,
    on_episode: EpisodeHook = None,
) -> DeployedModel:
    """Single-phase baseline: every class mixed from the start, nothing frozen."""
    logger = logging.getLogger("JointTraining")
    if cfg.phase != Phase.JOINT:
        raise ValueError(f"Joint training needs a {Phase.JOINT.name} phase config, got {cfg.phase.name}.")

    model.freeze_extractor(False)
    classes = sorted(split.common_classes + split.rare_classes)
    pools = split.by_class(split.full)
    trainer = trainer if trainer is not None else Trainer(model, cfg)
    logger.info(f"Joint training on classes {classes} for {cfg.episodes} episodes")
    trainer.train(lambda rng: sample_joint_task(pools, classes, cfg.s, cfg.q, rng), cfg.episodes, on_episode)
    return deploy(model, split, cfg)


# -----------------------------------------------------------------------------
# Loss log
# -----------------------------------------------------------------------------


def loss_row(metrics: EpisodeMetrics) -> List[str]:
    return [str(metrics.episode), repr(metrics.loss), repr(metrics.loc_loss), repr(metrics.cla_loss)]


def read_loss_log(path: Path, episodes: int) -> List[List[str]]:
    """Rows of an existing log, cut to the first ``episodes`` episodes."""
    with open(path, newline="") as file:
        rows = list(csv.reader(file))
    if not rows or rows[0] != LOSS_COLUMNS:
        raise ValueError(f"{path} is not a loss log.")
    return [row for row in rows[1:] if int(row[0]) < episodes]


def write_loss_log(path: Path, rows: List[List[str]]) -> None:
    with open(path, "w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        writer.writerows(rows)


def _progress() -> Progress:
    return Progress(
        TextColumn("[bold]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("L={task.fields[loss]}"),
        TimeElapsedColumn(),
        console=console,
    )


def _run_phase(
    out: Path,
    description: str,
    trainer: Trainer,
    cfg: PhaseConfig,
    rows: List[List[str]],
    run: Callable[[EpisodeHook], object],
    on_checkpoint: Optional[Callable[[Trainer], None]] = None,
):
    """Drive ``run`` with a progress bar, appending each episode to the loss log."""
    log_path = out / LOSS_LOG
    with _progress() as progress:
        bar = progress.add_task(description, total=cfg.episodes, completed=trainer.episode, loss="-")

        def on_episode(trainer: Trainer, metrics: EpisodeMetrics) -> None:
            rows.append(loss_row(metrics))
            progress.update(bar, completed=trainer.episode, loss=f"{metrics.loss:.4f}")
            if on_checkpoint is not None and trainer.episode % cfg.checkpoint_every == 0:
                write_loss_log(log_path, rows)
                on_checkpoint(trainer)

        try:
            return run(on_episode)
        finally:
            write_loss_log(log_path, rows)


def _fail(ex: BaseException) -> typer.Exit:
    console.print(f"[red]:heavy_multiplication_x:[/red] [bold]CLI:[/bold] {one_line(ex)}")
    return typer.Exit(code=1)


# -----------------------------------------------------------------------------
# CLI
# -----------------------------------------------------------------------------


def train_base(
    config_path: Optional[Path] = typer.Option(None, "--config", help="Path to the run configuration"),
    seed: Optional[int] = typer.Option(None, help="Override every seed of the configuration"),
    corpus_dir: Optional[Path] = typer.Option(None, "--corpus", help="Corpus directory (default: from the config)"),
    out: Path = typer.Option(Path("base"), help="Output directory"),
    force: bool = typer.Option(False, help="Overwrite a non-empty output directory"),
    resume: bool = typer.Option(False, help=f"Continue from {CHECKPOINT_FILE} in the output directory"),
):
    """
    Run the episodic base-training phase on the common classes

    This command will:
    - Load and split the corpus
    - Train for the configured number of episodes, checkpointing periodically
    - Write the checkpoint and the loss log
    """
    console.print("[blue]:information_source:[/blue] [bold]CLI:[/bold] Base training...")
    try:
        config = load_run_config(config_path, seed)
        split = resolve_split(load_corpus(corpus_dir or Path(config.corpus_dir)), config)
        fingerprint = config_fingerprint(config)
        model = MSDDModel(config.model)
        rows: List[List[str]] = []
        if resume:
            checkpoint = load_checkpoint(out / CHECKPOINT_FILE)
            if checkpoint.phase != Phase.BASE:
                raise CheckpointError(f"Cannot resume base training from a {checkpoint.phase.name} checkpoint.")
            if checkpoint.fingerprint != fingerprint:
                raise CheckpointError("The checkpoint was written under a different configuration.")
            trainer = restore_trainer(checkpoint, model, config.base)
            rows = read_loss_log(out / LOSS_LOG, checkpoint.episode)
            console.print(f"\t[green]:heavy_check_mark:[/green] Resuming at episode {trainer.episode}")
        else:
            prepare_output_dir(out, force)
            trainer = Trainer(model, config.base)
    except (ValueError, OSError) as ex:
        raise _fail(ex)

    handler = attach_run_log(out)
    try:
        archive_config(config, out)

        def on_checkpoint(trainer: Trainer) -> None:
            save_checkpoint(trainer_checkpoint(trainer, Phase.BASE, fingerprint), out / CHECKPOINT_FILE)

        _run_phase(
            out,
            "Base training",
            trainer,
            config.base,
            rows,
            lambda hook: base_train(model, split, config.base, trainer, hook),
            on_checkpoint,
        )
        on_checkpoint(trainer)
    except (EpisodeError, ValueError, RuntimeError, OSError) as ex:
        raise _fail(ex)
    finally:
        detach_run_log(handler)

    if trainer.history:
        console.print(f"\t[green]:heavy_check_mark:[/green] Final loss {trainer.history[-1].loss:.6f}")
    console.print(f"[green]:heavy_check_mark:[/green] [bold]CLI:[/bold] Checkpoint written to {out / CHECKPOINT_FILE}.")


def finetune_cmd(
    config_path: Optional[Path] = typer.Option(None, "--config", help="Path to the run configuration"),
    seed: Optional[int] = typer.Option(None, help="Override every seed of the configuration"),
    corpus_dir: Optional[Path] = typer.Option(None, "--corpus", help="Corpus directory (default: from the config)"),
    base: Path = typer.Option(Path("base") / CHECKPOINT_FILE, help="Base-training checkpoint"),
    out: Path = typer.Option(Path("finetuned"), help="Output directory"),
    force: bool = typer.Option(False, help="Overwrite a non-empty output directory"),
):
    """
    Run the few-shot fine-tuning phase and deploy the model

    This command will:
    - Restore the base-trained weights and freeze the feature extractor
    - Train on balanced episodes over every class
    - Write the deployed model with its prototype bank
    """
    console.print("[blue]:information_source:[/blue] [bold]CLI:[/bold] Fine-tuning...")
    try:
        config = load_run_config(config_path, seed)
        split = resolve_split(load_corpus(corpus_dir or Path(config.corpus_dir)), config)
        checkpoint = load_checkpoint(base)
        if checkpoint.phase != Phase.BASE:
            raise CheckpointError(f"{base} is a {checkpoint.phase.name} checkpoint, fine-tuning needs a BASE one.")
        model = MSDDModel(config.model)
        restore_trainer(checkpoint, model, config.base)
        prepare_output_dir(out, force)
    except (ValueError, OSError) as ex:
        raise _fail(ex)

    handler = attach_run_log(out)
    try:
        archive_config(config, out)
        if checkpoint.fingerprint != config_fingerprint(config):
            logging.getLogger("FineTuning").warning("The base checkpoint was written under a different configuration")
        trainer = Trainer(model, config.finetune)
        deployed = _run_phase(
            out,
            "Fine-tuning",
            trainer,
            config.finetune,
            [],
            lambda hook: finetune(model, split, config.finetune, trainer, hook),
        )
        checkpoint = trainer_checkpoint(trainer, Phase.FINETUNE, config_fingerprint(config), deployed)
        save_checkpoint(checkpoint, out / MODEL_FILE)
    except (EpisodeError, ValueError, RuntimeError, OSError) as ex:
        raise _fail(ex)
    finally:
        detach_run_log(handler)

    for class_id in deployed.class_ids:
        console.print(
            f"\t[green]:heavy_check_mark:[/green] Class {class_id} ({deployed.rarity[class_id].value}): "
            f"{len(deployed.support_ids[class_id])} support images"
        )
    console.print(f"[green]:heavy_check_mark:[/green] [bold]CLI:[/bold] Deployed model written to {out / MODEL_FILE}.")


__all__ = [
    "DeployedModel",
    "Detection",
    "Task",
    "Trainer",
    "base_train",
    "deploy",
    "detect",
    "finetune",
    "joint_train",
    "sample_joint_task",
    "sample_task",
]
