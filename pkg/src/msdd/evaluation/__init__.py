"""
Evaluation of deployed models: per-class report, joint-training baseline
comparison and embedding export.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import typer
from pydantic import BaseModel, computed_field
from rich import print_json
from rich.console import Console

from msdd.config_models import RunConfig
from msdd.corpus_models import Corpus, Rarity
from msdd.evaluation.embeddings import class_separation, export_embeddings, write_embeddings
from msdd.evaluation.metrics import MatchResult, ap_paper, ap_voc, match_detections, precision, recall
from msdd.evaluation.report import ClassAPRow, EvalReport, build_report, write_report
from msdd.model import MSDDModel
from msdd.synthgen import CorpusSplit, load_corpus, resolve_split
from msdd.training import joint_train
from msdd.training.checkpoint import load_checkpoint, restore_deployed
from msdd.training.deploy import DeployedModel
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


class Baseline(str, Enum):
    joint = "joint"


class BaselineComparison(BaseModel):
    baseline: Baseline
    rare_mean_ap: Optional[float]
    baseline_rare_mean_ap: Optional[float]
    common_mean_ap: Optional[float]
    baseline_common_mean_ap: Optional[float]

    @computed_field  # type: ignore[misc]
    @property
    def rare_gain(self) -> Optional[float]:
        if self.rare_mean_ap is None or self.baseline_rare_mean_ap is None:
            return None
        return self.rare_mean_ap - self.baseline_rare_mean_ap


def compare(report: EvalReport, baseline_report: EvalReport, baseline: Baseline) -> BaselineComparison:
    return BaselineComparison(
        baseline=baseline,
        rare_mean_ap=report.rare_mean_ap,
        baseline_rare_mean_ap=baseline_report.rare_mean_ap,
        common_mean_ap=report.common_mean_ap,
        baseline_common_mean_ap=baseline_report.common_mean_ap,
    )


def load_deployed(
    config_path: Optional[Path], seed: Optional[int], corpus_dir: Optional[Path], model_file: Path
) -> Tuple[RunConfig, Corpus, CorpusSplit, DeployedModel]:
    """Configuration, corpus, split and deployed model shared by the evaluation commands.

    :raises ValueError: when the evaluation split is empty or the model file is unusable
    """
    config = load_run_config(config_path, seed)
    corpus = load_corpus(corpus_dir or Path(config.corpus_dir))
    split = resolve_split(corpus, config)
    if not split.eval:
        raise ValueError("The evaluation split is empty.")
    checkpoint = load_checkpoint(model_file)
    if checkpoint.fingerprint != config_fingerprint(config):
        logging.getLogger("Evaluator").warning(f"{model_file} was written under a different configuration")
    deployed = restore_deployed(checkpoint, MSDDModel(config.model))
    deployed.image_size = tuple(corpus.manifest.image_size)  # type: ignore[assignment]
    return config, corpus, split, deployed


def _fail(ex: BaseException) -> typer.Exit:
    console.print(f"[red]:heavy_multiplication_x:[/red] [bold]CLI:[/bold] {one_line(ex)}")
    return typer.Exit(code=1)


def _print_rows(report: EvalReport) -> None:
    for row in report.rows:
        if row.no_data:
            console.print(f"\t[red]:heavy_multiplication_x:[/red] Class {row.class_id} {row.name}: no data")
            continue
        console.print(
            f"\t[green]:heavy_check_mark:[/green] Class {row.class_id} {row.name} ({row.rarity.value}): "
            f"P={row.precision:.3f} R={row.recall:.3f} AP={row.ap_paper:.3f} AP_voc={row.ap_voc:.3f}"
        )


# -----------------------------------------------------------------------------
# CLI
# -----------------------------------------------------------------------------


def evaluate(
    config_path: Optional[Path] = typer.Option(None, "--config", help="Path to the run configuration"),
    seed: Optional[int] = typer.Option(None, help="Override every seed of the configuration"),
    corpus_dir: Optional[Path] = typer.Option(None, "--corpus", help="Corpus directory (default: from the config)"),
    model_file: Path = typer.Option(Path("finetuned") / "model.msdd", "--model", help="Deployed model file"),
    out: Path = typer.Option(Path("evaluation"), help="Output directory"),
    force: bool = typer.Option(False, help="Overwrite a non-empty output directory"),
    baseline: Optional[Baseline] = typer.Option(None, help="Also train and evaluate a baseline for comparison"),
):
    """
    Evaluate a deployed model on the held-out split

    This command will:
    - Detect defects on every evaluation image
    - Write the per-class report (report.json, report.csv)
    - Optionally train the joint baseline and write its report and the comparison
    """
    console.print("[blue]:information_source:[/blue] [bold]CLI:[/bold] Evaluating...")
    try:
        config, corpus, split, deployed = load_deployed(config_path, seed, corpus_dir, model_file)
        prepare_output_dir(out, force)
    except (ValueError, OSError) as ex:
        raise _fail(ex)

    handler = attach_run_log(out)
    try:
        archive_config(config, out)
        config_dump = config.model_dump(mode="json")
        report = build_report(
            deployed, split.eval, corpus.class_specs, config.evaluation, corpus.manifest.content_hash, config_dump
        )
        write_report(report, out)
        comparison = None
        if baseline is not None:
            with console.status("Training the joint baseline..."):
                baseline_model = joint_train(MSDDModel(config.model), split, config.joint)
            baseline_report = build_report(
                baseline_model,
                split.eval,
                corpus.class_specs,
                config.evaluation,
                corpus.manifest.content_hash,
                config_dump,
            )
            write_report(baseline_report, out, stem=f"report_{baseline.value}")
            comparison = compare(report, baseline_report, baseline)
            (out / "comparison.json").write_text(comparison.model_dump_json(indent=4) + "\n")
    except (ValueError, RuntimeError, OSError) as ex:
        raise _fail(ex)
    finally:
        detach_run_log(handler)

    _print_rows(report)
    print_json(report.model_dump_json(include={"common_mean_ap", "rare_mean_ap", "model_fingerprint"}))
    if comparison is not None:
        print_json(comparison.model_dump_json())
    console.print(f"[green]:heavy_check_mark:[/green] [bold]CLI:[/bold] Report written to {out}.")


def export_embeddings_cmd(
    config_path: Optional[Path] = typer.Option(None, "--config", help="Path to the run configuration"),
    seed: Optional[int] = typer.Option(None, help="Override every seed of the configuration"),
    corpus_dir: Optional[Path] = typer.Option(None, "--corpus", help="Corpus directory (default: from the config)"),
    model_file: Path = typer.Option(Path("finetuned") / "model.msdd", "--model", help="Deployed model file"),
    out: Path = typer.Option(Path("embeddings"), help="Output directory"),
    force: bool = typer.Option(False, help="Overwrite a non-empty output directory"),
):
    """
    Export the metric-space embeddings of the held-out split

    This command will:
    - Embed every evaluation ground-truth box with its class' reweighting
    - Add the prototypes and a two-component PCA projection
    - Write embeddings.csv
    """
    console.print("[blue]:information_source:[/blue] [bold]CLI:[/bold] Exporting embeddings...")
    try:
        config, corpus, split, deployed = load_deployed(config_path, seed, corpus_dir, model_file)
        prepare_output_dir(out, force)
    except (ValueError, OSError) as ex:
        raise _fail(ex)

    handler = attach_run_log(out)
    try:
        archive_config(config, out)
        rows = export_embeddings(deployed, split.eval)
        write_embeddings(rows, out / "embeddings.csv")
    except (ValueError, OSError) as ex:
        raise _fail(ex)
    finally:
        detach_run_log(handler)

    common = [row for row in rows if deployed.rarity.get(row.class_id) == Rarity.common]
    if len({row.class_id for row in common}) > 1:
        intra, inter = class_separation(common)
        console.print(f"\t[green]:heavy_check_mark:[/green] Common classes: intra {intra:.4f} / inter {inter:.4f}")
    console.print(f"[green]:heavy_check_mark:[/green] [bold]CLI:[/bold] {len(rows)} embeddings written to {out}.")


__all__ = [
    "ClassAPRow",
    "EvalReport",
    "MatchResult",
    "ap_paper",
    "ap_voc",
    "build_report",
    "evaluate",
    "export_embeddings",
    "export_embeddings_cmd",
    "match_detections",
    "precision",
    "recall",
]
