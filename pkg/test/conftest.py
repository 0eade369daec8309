from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
import pytest
from typer.testing import CliRunner

from msdd.config_models import RunConfig
from msdd.corpus_models import BBoxAnnotation, Corpus, DefectImage
from msdd.model import MSDDModel
from msdd.synthgen import CorpusSplit, generate_from_config, split_from_config
from msdd.training import base_train, finetune, joint_train
from msdd.training.deploy import DeployedModel, deploy
from msdd.training.episodes import EpisodeMetrics
from msdd.utils import load_run_config

TINY_CONFIG = Path(__file__).parent / "configs" / "tiny.json"


@pytest.fixture()
def cli_runner():
    return CliRunner()


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return load_run_config(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config) -> Corpus:
    return generate_from_config(tiny_config)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus, tiny_config) -> CorpusSplit:
    return split_from_config(tiny_corpus, tiny_config)


@pytest.fixture()
def tiny_model(tiny_config) -> MSDDModel:
    return MSDDModel(tiny_config.model)


def make_image(identifier: str, class_id: int, boxes, size=(64, 64), fill: int = 128) -> DefectImage:
    """Flat image with a brighter square under every box."""
    pixels = np.full(size, fill, dtype=np.uint8)
    for x1, y1, x2, y2 in boxes:
        pixels[y1:y2, x1:x2] = 230
    return DefectImage(
        id=identifier,
        pixels=pixels,
        class_id=class_id,
        annotations=[BBoxAnnotation(class_id=class_id, box=box) for box in boxes],
        source_id=identifier,
    )


@dataclass
class DefaultRun:
    config: RunConfig
    corpus: Corpus
    split: CorpusSplit
    base_history: List[EpisodeMetrics]
    # Copy of the weights right after base training
    base_model: MSDDModel
    # Prototypes of every class on the base model, without fine-tuning
    bolted: DeployedModel
    finetuned: DeployedModel
    joint: DeployedModel


@pytest.fixture(scope="session")
def default_run() -> DefaultRun:
    """Both phases and the joint baseline on the default configuration; several minutes of training."""
    config = RunConfig()
    corpus = generate_from_config(config)
    split = split_from_config(corpus, config)

    model = MSDDModel(config.model)
    history = base_train(model, split, config.base).history
    base_model = model.astype(model.dtype)
    bolted = deploy(base_model, split, config.finetune)
    finetuned = finetune(model, split, config.finetune)
    joint = joint_train(MSDDModel(config.model), split, config.joint)
    return DefaultRun(config, corpus, split, history, base_model, bolted, finetuned, joint)
