"""
Utils.
"""
import hashlib
import logging
import shutil
from pathlib import Path
from typing import Optional

from ruamel.yaml import YAML

from msdd.config_models import RunConfig

LOG_FORMAT = "%(asctime)s | %(name)s | %(levelname)s | %(message)s"


def load_run_config(config_path: Optional[Path], seed: Optional[int] = None) -> RunConfig:
    """Load and validate a run configuration.

    :param config_path: JSON or YAML file; the defaults are used when None
    :param seed: when given, replaces every seed of the configuration

    :return: the validated configuration
    """
    if config_path is None:
        config = RunConfig()
    else:
        with open(config_path, "r") as file:
            content = YAML(typ="safe").load(file)
        config = RunConfig.model_validate(content or {})
    if seed is not None:
        config = config.with_seed(seed)
    return config


def config_fingerprint(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON rendering of ``config``."""
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


def prepare_output_dir(out_dir: Path, force: bool = False) -> Path:
    """Create ``out_dir``; a non-empty directory is only reused with ``force``."""
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(f"Output directory {out_dir} is not empty (use --force to overwrite).")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def archive_config(config: RunConfig, out_dir: Path) -> Path:
    path = out_dir / "config.json"
    path.write_text(config.model_dump_json(indent=4) + "\n")
    return path


def attach_run_log(out_dir: Path) -> logging.Handler:
    """Mirror every log record into ``<out_dir>/run.log``.

    Timestamps only live in this sidecar file, never in the run's results.
    """
    handler = logging.FileHandler(out_dir / "run.log", mode="a")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def one_line(ex: BaseException) -> str:
    """Collapse an exception message onto a single line for CLI diagnostics."""
    return " ".join(str(ex).split()) or type(ex).__name__
