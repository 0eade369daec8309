import logging
from importlib.metadata import PackageNotFoundError, version

import typer

from msdd.evaluation import evaluate, export_embeddings_cmd
from msdd.synthgen import gen_data
from msdd.training import finetune_cmd, train_base
from msdd.utils import LOG_FORMAT

logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)

try:
    __version__ = version("msdd")
except PackageNotFoundError:
    # package is not installed
    pass

app = typer.Typer()

app.command("gen-data")(gen_data)
app.command("train-base")(train_base)
app.command("finetune")(finetune_cmd)
app.command("evaluate")(evaluate)
app.command("export-embeddings")(export_embeddings_cmd)

if __name__ == "__main__":
    app()
