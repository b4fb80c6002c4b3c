"""``ctefm`` command line: synth-corpus, train, convert, eval."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import torch

from .checkpoint import CheckpointError, save_checkpoint
from .corpus import synth_corpus
from .data import read_manifest
from .trainer import Trainer, TrainConfig

EXPECTED = (ValueError, OSError, KeyError, RuntimeError, FloatingPointError)


def _fail(exc: Exception):
    raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Zero-shot voice conversion: corpus synthesis, training, conversion and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("synth-corpus")
@click.option("--n-speakers", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--n-utts", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def synth_corpus_cmd(n_speakers, n_utts, out_dir, seed, force):
    """Write a synthetic multi-speaker corpus and its manifest."""
    try:
        manifest = synth_corpus(n_speakers, n_utts, out_dir, seed=seed, force=force)
    except EXPECTED as exc:
        _fail(exc)
    click.echo(str(manifest))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Flat TOML or JSON file whose keys mirror TrainConfig.")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--max-iters", type=click.IntRange(min=0), default=None, help="Overrides the config value.")
@click.option("--seed", type=int, default=None, help="Overrides the config value.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a checkpoint.")
def train(config_path, manifest_path, out_dir, max_iters, seed, resume):
    """Train on the manifest's train split; writes checkpoints and metrics.jsonl to OUT_DIR."""
    overrides = {k: v for k, v in (("max_iters", max_iters), ("seed", seed)) if v is not None}
    try:
        items = read_manifest(manifest_path)
        if resume:
            trainer = Trainer.from_checkpoint(resume, items, **overrides)
        else:
            base = TrainConfig.from_file(config_path).to_dict() if config_path else {}
            trainer = Trainer(TrainConfig.from_mapping({**base, **overrides}), items)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if trainer.iteration >= trainer.cfg.max_iters:
            save_checkpoint(out / "final.ctefm", trainer.checkpoint())
        else:
            trainer.fit(out, out / "metrics.jsonl")
    except (*EXPECTED, CheckpointError) as exc:
        _fail(exc)
    click.echo(str(Path(out_dir) / "final.ctefm"))


@main.command()
@click.option("--source", "source_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--output", "output_path", type=click.Path(dir_okay=False), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--euler-steps", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--vocoder", type=click.Choice(["identity-mel", "external"]), default="identity-mel",
              show_default=True)
@click.option("--vocoder-command", default=None,
              help="For --vocoder external: command with {mel} and {wav} placeholders.")
def convert(source_path, reference_path, output_path, checkpoint_path, euler_steps, seed, vocoder,
            vocoder_command):
    """Re-voice SOURCE with the timbre of REFERENCE."""
    from .pipeline import ConversionRequest, make_vocoder, run_conversion

    try:
        req = ConversionRequest(source_path, reference_path, output_path, checkpoint_path, euler_steps, seed)
        torch.manual_seed(seed)
        out = run_conversion(req, make_vocoder(vocoder, vocoder_command))
    except (*EXPECTED, CheckpointError) as exc:
        _fail(exc)
    click.echo(str(out))


@main.command("eval")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-report", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-pairs", type=click.IntRange(min=1), default=None, help="Defaults to one per item.")
@click.option("--euler-steps", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--split", default="val", show_default=True, help="Manifest split to evaluate; 'all' for every item.")
def eval_cmd(manifest, checkpoint, out_report, seed, n_pairs, euler_steps, split):
    """Objective speaker-similarity report on held-out pairs."""
    from .pipeline import run_eval

    try:
        report = run_eval(manifest, checkpoint, out_report, seed, n_pairs, euler_steps,
                          None if split == "all" else split)
    except (*EXPECTED, CheckpointError) as exc:
        _fail(exc)
    summary = {k: report[k] for k in ("n_pairs", "secs_mean", "mel_mse_teacher", "direction_rate")}
    click.echo(json.dumps(summary))


if __name__ == "__main__":
    main()
