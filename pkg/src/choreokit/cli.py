"""Command-line interface.

Subcommands mirror the pipeline stages plus direct access to the evaluation
primitives. Exit codes: 0 success, 1 user error (bad arguments or inputs),
2 internal error.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import traceback
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bank import load_bank, retrieve
from .corpus import read_music, text_condition_tokens
from .diffusion import (
    NoiseSchedule,
    cfg_sample,
    load_backbone,
    load_branch,
    load_readout,
    sequence_from_clip,
)
from .errors import UserInputError
from .kps import PredicateThresholds, eval_predicate, run_kps
from .motion import read_joint_sequence, write_joint_sequence, write_motion_clip
from .pipeline import (
    Pipeline,
    PipelineConfig,
    load_config,
    load_generator,
    run_pipeline,
    save_config,
)
from .reports import emit_report


@click.group()
@click.version_option(version=__version__, prog_name="choreokit")
def cli():
    """Desk-scale music- and text-conditioned motion pipeline."""


def _config_from_options(config_path, seed, out_dir) -> PipelineConfig:
    config = load_config(config_path) if config_path else PipelineConfig()
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out_dir is not None:
        updates["out_dir"] = str(out_dir)
    return dataclasses.replace(config, **updates) if updates else config


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="Pipeline config JSON."),
    click.option("--seed", type=int, default=None, help="Override the root seed."),
    click.option("--out-dir", type=click.Path(), default=None, help="Run directory."),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@cli.command()
@shared_options
def synth(config_path, seed, out_dir):
    """Synthesize the labelled motion corpora and paired music."""
    Pipeline(_config_from_options(config_path, seed, out_dir)).stage_synth()


@cli.command()
@shared_options
def align(config_path, seed, out_dir):
    """Train the cross-modal alignment space on the synthesized corpora."""
    Pipeline(_config_from_options(config_path, seed, out_dir)).stage_align()


@cli.group()
def bank():
    """Embedding bank operations."""


@bank.command("build")
@shared_options
def bank_build(config_path, seed, out_dir):
    """Index both corpora into motion-keyed banks."""
    Pipeline(_config_from_options(config_path, seed, out_dir)).stage_bank()


@bank.command("retrieve")
@click.option("--bank", "bank_path", type=click.Path(exists=True), required=True)
@click.option("--query", "query_path", type=click.Path(exists=True), required=True,
              help="JSON file holding one embedding vector.")
def bank_retrieve(bank_path, query_path):
    """Nearest-neighbour lookup of one query embedding."""
    bank_obj = load_bank(bank_path)
    query = np.asarray(json.loads(Path(query_path).read_text()), dtype=float)
    hit = retrieve(bank_obj, query)
    if hit is None:
        click.echo(json.dumps({"match": None}))
        return
    payload, similarity = hit
    payload = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
               for k, v in payload.items()}
    click.echo(json.dumps({"match": payload, "similarity": similarity}))


@bank.command("stats")
@click.option("--out", "out_path", type=click.Path(), required=True)
@shared_options
def bank_stats(out_path, config_path, seed, out_dir):
    """Recompute retrieval statistics for the run's banks."""
    pipeline = Pipeline(_config_from_options(config_path, seed, out_dir))
    pipeline.stage_bank()
    import shutil

    shutil.copyfile(pipeline.paths["retrieval"], out_path)
    click.echo(str(out_path))


@cli.group()
def gen():
    """Generator training, fine-tuning, and sampling."""


@gen.command("train-backbone")
@shared_options
def gen_train_backbone(config_path, seed, out_dir):
    """Train the music-conditioned denoiser and fit the position readout."""
    Pipeline(_config_from_options(config_path, seed, out_dir)).stage_train()


@gen.command("finetune")
@shared_options
def gen_finetune(config_path, seed, out_dir):
    """Fine-tune the text control branch on pseudo-triplets."""
    Pipeline(_config_from_options(config_path, seed, out_dir)).stage_finetune()


@gen.command("sample")
@click.option("--backbone", "backbone_path", type=click.Path(exists=True), required=True)
@click.option("--branch", "branch_path", type=click.Path(exists=True), default=None)
@click.option("--readout", "readout_path", type=click.Path(exists=True), default=None,
              help="Also write decoded joint positions next to the clip.")
@click.option("--music", "music_path", required=True,
              help="Music feature file, or the literal 'null'.")
@click.option("--text", "prompt", required=True,
              help="Prompt string, or the literal 'null'.")
@click.option("--scale", type=float, default=3.0, show_default=True)
@click.option("--steps", "sample_steps", type=int, default=None,
              help="Sampling steps (default: the backbone's schedule length).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def gen_sample(backbone_path, branch_path, readout_path, music_path, prompt, scale,
               sample_steps, seed, out_path):
    """Sample one clip under music and/or text conditioning."""
    backbone = load_backbone(backbone_path)
    branch = load_branch(branch_path, backbone) if branch_path else None
    music = None if music_path == "null" else read_music(music_path)
    c_music = None if music is None else np.asarray(music["features"])
    c_text = None if prompt == "null" else text_condition_tokens(prompt)
    if c_music is None and c_text is None:
        raise UserInputError("need music, text, or both; got null for each")
    schedule = NoiseSchedule.cosine(sample_steps or backbone.config.timesteps)
    clip = cfg_sample(backbone, branch, c_music, c_text, music_scale=scale,
                      schedule=schedule, seed=seed)
    write_motion_clip(out_path, clip)
    if readout_path:
        seq = sequence_from_clip(load_readout(readout_path), clip)
        positions_path = Path(out_path).with_suffix(".positions.json")
        write_joint_sequence(positions_path, seq)
        click.echo(f"{out_path} {positions_path}")
    else:
        click.echo(str(out_path))


@cli.group()
def kps():
    """Kinematic predicate evaluation."""


@kps.command("run")
@click.option("--generator", "generator_spec", type=click.Path(exists=True), required=True,
              help="Generator spec JSON (kind: diffusion | oracle | text_ignoring).")
@click.option("--prompts", "prompts_path", type=click.Path(exists=True), required=True,
              help="JSON list of prompt strings.")
@click.option("--music-pool", "music_dir", type=click.Path(exists=True), required=True,
              help="Directory of music feature files.")
@click.option("-R", "replicates", type=int, default=10, show_default=True)
@click.option("-G", "groups", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def kps_run(generator_spec, prompts_path, music_dir, replicates, groups, seed, out_path):
    """Run the prompted/null success protocol and write the report."""
    generator = load_generator(generator_spec, base_dir=Path(generator_spec).parent)
    prompts = json.loads(Path(prompts_path).read_text())
    pool = [read_music(p) for p in sorted(Path(music_dir).glob("*.json"))]
    report = run_kps(generator, prompts, pool, R=replicates, G=groups, seed=seed)
    json_path, text_path = emit_report("kps", report.to_dict(), out_path)
    click.echo(f"{json_path} {text_path}")


@kps.command("predicate")
@click.option("--name", required=True, help="Predicate name (e.g. turn).")
@click.option("--motion", "motion_path", type=click.Path(exists=True), required=True,
              help="Joint-sequence motion file.")
def kps_predicate(name, motion_path):
    """Evaluate one predicate on a motion file and print the result as JSON."""
    seq = read_joint_sequence(motion_path)
    result = eval_predicate(name, seq, PredicateThresholds())
    click.echo(json.dumps({"name": result.name, "passed": result.passed,
                           "measured": result.measured}, sort_keys=True))


@cli.command()
@click.option("--kind", type=click.Choice(["kps", "retrieval", "tradeoff"]), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="Report data JSON.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def report(kind, data_path, out_path):
    """Render a report JSON into its plain-text table form."""
    data = json.loads(Path(data_path).read_text())
    json_path, text_path = emit_report(kind, data, out_path,
                                       data.get("config_digest", ""))
    click.echo(f"{json_path} {text_path}")


@cli.command()
@click.option("--stages", default=None,
              help="Comma-separated subset of: synth,align,bank,train,finetune,evaluate.")
@shared_options
def pipeline(stages, config_path, seed, out_dir):
    """Run the full pipeline (or a subset of stages) and write all reports."""
    config = _config_from_options(config_path, seed, out_dir)
    stage_list = [s.strip() for s in stages.split(",")] if stages else None
    produced = run_pipeline(config, stage_list)
    save_config(config, Path(config.out_dir) / "config.json")
    for stage, outputs in produced.items():
        click.echo(f"{stage}: {' '.join(outputs)}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except (click.ClickException, UserInputError) as exc:
        message = exc.format_message() if isinstance(exc, click.ClickException) else str(exc)
        click.echo(f"error: {message}", err=True)
        sys.exit(1)
    except Exception:  # internal failure
        traceback.print_exc()
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
