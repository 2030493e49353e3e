"""End-to-end pipeline: synthesize, align, bank, train, finetune, evaluate.

Stages run in dependency order and record their inputs, outputs, and config
digests in a manifest; re-running a completed stage with unchanged inputs is
a no-op. All artifacts are JSON (plus CSV loss traces) so runs diff cleanly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, serial
from .align import (
    AlignConfig,
    class_retrieval_accuracy,
    load_alignment,
    save_alignment,
    train_alignment,
    write_trace_csv,
)
from .bank import build_bank, load_bank, make_pseudo_triplets, retrieval_stats, save_bank
from .corpus import (
    CorpusItem,
    alignment_pairs,
    assemble_corpus,
    motion_condition_tokens,
    read_music,
    text_condition_tokens,
    write_music,
)
from .diffusion import (
    GenConfig,
    LossWeights,
    NoiseSchedule,
    build_control_branch,
    cfg_sample,
    finetune_control,
    fit_position_readout,
    load_backbone,
    load_branch,
    load_readout,
    save_backbone,
    save_branch,
    save_readout,
    sequence_from_clip,
    train_backbone,
)
from .errors import StageDependencyError, UserInputError
from .kps import FAMILIES, beat_alignment_score, diversity, kinematic_beats, run_kps
from .motion import (
    JointSequence,
    joint_sequence_from_dict,
    joint_sequence_to_dict,
)
from .reports import emit_report
from .seeding import stable_seed
from .synth import CALIBRATED_MAGNITUDES, PRIMITIVES, PrimitiveSpec, synthesize

STAGES = ("synth", "align", "bank", "train", "finetune", "evaluate")

KPS_PROMPTS = tuple(p for p in PRIMITIVES if p != "idle")


@dataclass(frozen=True)
class SynthParams:
    n_music_dance: int = 64
    n_text_motion: int = 64
    duration_s: float = 4.0
    fps: int = 30


@dataclass(frozen=True)
class KpsParams:
    replicates: int = 10
    groups: int = 5
    music_scale: float = 3.0
    sample_timesteps: int | None = None  # None: the generator config's count


@dataclass(frozen=True)
class TradeoffParams:
    enabled: bool = False
    music_scales: tuple = (1.0, 2.0, 3.0)
    samples_per_cell: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    synth: SynthParams = field(default_factory=SynthParams)
    align: AlignConfig = field(default_factory=AlignConfig)
    bank_threshold: float = 0.8
    gen: GenConfig = field(default_factory=GenConfig)
    finetune_steps: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    kps: KpsParams = field(default_factory=KpsParams)
    tradeoff: TradeoffParams = field(default_factory=TradeoffParams)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        for key, sub in (("synth", SynthParams), ("align", AlignConfig),
                         ("gen", GenConfig), ("kps", KpsParams),
                         ("weights", LossWeights), ("tradeoff", TradeoffParams)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        return cls(**data)

    def digest(self) -> str:
        # out_dir is storage metadata: equivalent runs in different
        # directories must produce byte-identical reports.
        semantic = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return serial.config_digest(semantic)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: PipelineConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))


class _Manifest:
    """Per-run record of stage digests for idempotence checks."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"version": __version__, "stages": {}}

    def stage_is_current(self, stage: str, config_digest: str, outputs) -> bool:
        record = self.data["stages"].get(stage)
        if record is None or record["config_digest"] != config_digest:
            return False
        for path in outputs:
            path = Path(path)
            if not path.exists():
                return False
            if record["outputs"].get(path.name) != serial.file_digest(path):
                return False
        return True

    def record(self, stage: str, config_digest: str, outputs):
        self.data["stages"][stage] = {
            "config_digest": config_digest,
            "outputs": {Path(p).name: serial.file_digest(p) for p in outputs},
        }
        self.data["config_digest"] = config_digest
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))


def _corpus_paths(out_dir: Path, kind: str):
    return out_dir / "corpora" / f"{kind}.json"


def _write_corpus(path: Path, items):
    payload = []
    for it in items:
        entry = {
            "source_id": it.source_id,
            "label": it.label,
            "description": it.description,
            "genre": it.genre,
            "sequence": joint_sequence_to_dict(JointSequence(it.positions)),
            "features": it.features.ravel().tolist(),
            "feature_dim": it.features.shape[1],
        }
        if it.music is not None:
            music = dict(it.music)
            music["features"] = np.asarray(music["features"]).ravel().tolist()
            entry["music"] = music
        payload.append(entry)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))


def _read_corpus(path: Path):
    items = []
    for entry in json.loads(Path(path).read_text()):
        seq = joint_sequence_from_dict(entry["sequence"])
        feats = np.asarray(entry["features"]).reshape(-1, entry["feature_dim"])
        music = None
        if "music" in entry:
            music = dict(entry["music"])
            music["features"] = np.asarray(music["features"]).reshape(
                music["frames"], music["dim"])
        items.append(CorpusItem(
            source_id=entry["source_id"], label=entry["label"],
            description=entry["description"], genre=entry["genre"],
            positions=seq.positions, features=feats,
            motion_tokens=motion_condition_tokens(feats), music=music))
    return items


def _require(stage: str, *paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise StageDependencyError(stage, f"stage '{stage}' missing inputs: {missing}")


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.manifest = _Manifest(self.out)
        self.paths = {
            "corpus_da": _corpus_paths(self.out, "music_dance"),
            "corpus_mo": _corpus_paths(self.out, "text_motion"),
            "alignment": self.out / "checkpoints" / "alignment.json",
            "align_trace": self.out / "reports" / "align_trace.csv",
            "bank_md": self.out / "banks" / "bank_md.json",
            "bank_tm": self.out / "banks" / "bank_tm.json",
            "retrieval": self.out / "reports" / "retrieval_stats.json",
            "backbone": self.out / "checkpoints" / "backbone.json",
            "backbone_trace": self.out / "reports" / "backbone_trace.csv",
            "readout": self.out / "checkpoints" / "readout.json",
            "branch": self.out / "checkpoints" / "branch.json",
            "finetune_trace": self.out / "reports" / "finetune_trace.csv",
            "kps": self.out / "reports" / "kps_report.json",
            "tradeoff": self.out / "reports" / "tradeoff.json",
        }

    # -- stages ------------------------------------------------------------

    def stage_synth(self):
        cfg = self.config
        outputs = [self.paths["corpus_da"], self.paths["corpus_mo"]]
        if self.manifest.stage_is_current("synth", cfg.digest(), outputs):
            return outputs
        da = assemble_corpus("music_dance", cfg.synth.n_music_dance,
                             stable_seed(cfg.seed, "corpus-da"),
                             cfg.synth.duration_s, cfg.synth.fps)
        mo = assemble_corpus("text_motion", cfg.synth.n_text_motion,
                             stable_seed(cfg.seed, "corpus-mo"),
                             cfg.synth.duration_s, cfg.synth.fps)
        _write_corpus(self.paths["corpus_da"], da)
        _write_corpus(self.paths["corpus_mo"], mo)
        self.manifest.record("synth", cfg.digest(), outputs)
        return outputs

    def stage_align(self):
        cfg = self.config
        outputs = [self.paths["alignment"], self.paths["align_trace"]]
        if self.manifest.stage_is_current("align", cfg.digest(), outputs):
            return outputs
        _require("align", self.paths["corpus_da"], self.paths["corpus_mo"])
        da = _read_corpus(self.paths["corpus_da"])
        mo = _read_corpus(self.paths["corpus_mo"])
        align_cfg = dataclasses.replace(cfg.align, seed=stable_seed(cfg.seed, "align"))
        space, trace = train_alignment(alignment_pairs(da)[0], alignment_pairs(mo)[0],
                                       align_cfg)
        save_alignment(space, self.paths["alignment"])
        write_trace_csv(self.paths["align_trace"], trace)
        self.manifest.record("align", cfg.digest(), outputs)
        return outputs

    def stage_bank(self):
        cfg = self.config
        outputs = [self.paths["bank_md"], self.paths["bank_tm"], self.paths["retrieval"]]
        if self.manifest.stage_is_current("bank", cfg.digest(), outputs):
            return outputs
        _require("bank", self.paths["alignment"], self.paths["corpus_da"],
                 self.paths["corpus_mo"])
        space = load_alignment(self.paths["alignment"])
        da = [it.with_embedding(space.embed("motion", it.motion_tokens))
              for it in _read_corpus(self.paths["corpus_da"])]
        mo = [it.with_embedding(space.embed("motion", it.motion_tokens))
              for it in _read_corpus(self.paths["corpus_mo"])]
        bank_md = build_bank(da, space, "MD", cfg.bank_threshold)
        bank_tm = build_bank(mo, space, "TM", cfg.bank_threshold)
        save_bank(self.paths["bank_md"], bank_md)
        save_bank(self.paths["bank_tm"], bank_tm)
        stats = retrieval_stats(bank_md, bank_tm,
                                [it.motion_embedding for it in da],
                                [it.motion_embedding for it in mo])
        emit_report("retrieval", stats.to_dict(), self.paths["retrieval"], cfg.digest())
        self.manifest.record("bank", cfg.digest(), outputs)
        return outputs

    def stage_train(self):
        cfg = self.config
        outputs = [self.paths["backbone"], self.paths["backbone_trace"],
                   self.paths["readout"]]
        if self.manifest.stage_is_current("train", cfg.digest(), outputs):
            return outputs
        _require("train", self.paths["corpus_da"], self.paths["corpus_mo"])
        da = _read_corpus(self.paths["corpus_da"])
        mo = _read_corpus(self.paths["corpus_mo"])
        gen_cfg = dataclasses.replace(cfg.gen, seed=stable_seed(cfg.seed, "backbone"))
        model, trace = train_backbone([(it.features, it.music["features"]) for it in da],
                                      gen_cfg, cfg.weights)
        save_backbone(self.paths["backbone"], model)
        write_trace_csv(self.paths["backbone_trace"], trace)
        readout = fit_position_readout(
            [it.features for it in da + mo], [it.positions for it in da + mo])
        save_readout(self.paths["readout"], readout)
        self.manifest.record("train", cfg.digest(), outputs)
        return outputs

    def stage_finetune(self):
        cfg = self.config
        outputs = [self.paths["branch"], self.paths["finetune_trace"]]
        if self.manifest.stage_is_current("finetune", cfg.digest(), outputs):
            return outputs
        _require("finetune", self.paths["backbone"], self.paths["bank_md"],
                 self.paths["bank_tm"], self.paths["alignment"])
        space = load_alignment(self.paths["alignment"])
        banks = {"MD": load_bank(self.paths["bank_md"]),
                 "TM": load_bank(self.paths["bank_tm"])}
        da = [it.with_embedding(space.embed("motion", it.motion_tokens))
              for it in _read_corpus(self.paths["corpus_da"])]
        mo = [it.with_embedding(space.embed("motion", it.motion_tokens))
              for it in _read_corpus(self.paths["corpus_mo"])]
        trip_text = make_pseudo_triplets(mo, "text_motion", banks)
        trip_dance = make_pseudo_triplets(da, "music_dance", banks)
        backbone = load_backbone(self.paths["backbone"])
        gen_cfg = dataclasses.replace(cfg.gen, steps=cfg.finetune_steps,
                                      seed=stable_seed(cfg.seed, "finetune"))
        branch = build_control_branch(backbone, gen_cfg)
        branch, trace = finetune_control(backbone, branch, trip_text, trip_dance,
                                         cfg.weights, gen_cfg)
        save_branch(self.paths["branch"], branch, gen_cfg)
        write_trace_csv(self.paths["finetune_trace"], trace)
        self.manifest.record("finetune", cfg.digest(), outputs)
        return outputs

    def stage_evaluate(self):
        cfg = self.config
        outputs = [self.paths["kps"]]
        if cfg.tradeoff.enabled:
            outputs.append(self.paths["tradeoff"])
        if self.manifest.stage_is_current("evaluate", cfg.digest(), outputs):
            return outputs
        _require("evaluate", self.paths["backbone"], self.paths["branch"],
                 self.paths["readout"], self.paths["corpus_da"])
        generator = self.build_generator(music_scale=cfg.kps.music_scale)
        music_pool = self.music_pool()
        report = run_kps(generator, KPS_PROMPTS, music_pool,
                         R=cfg.kps.replicates, G=cfg.kps.groups,
                         seed=stable_seed(cfg.seed, "kps"))
        emit_report("kps", report.to_dict(), self.paths["kps"], cfg.digest())
        if cfg.tradeoff.enabled:
            grid = self.tradeoff_grid(music_pool)
            emit_report("tradeoff", {"grid": grid}, self.paths["tradeoff"], cfg.digest())
        self.manifest.record("evaluate", cfg.digest(), outputs)
        return outputs

    # -- helpers -----------------------------------------------------------

    def music_pool(self):
        da = _read_corpus(self.paths["corpus_da"])
        return [it.music for it in da]

    def build_generator(self, music_scale: float):
        backbone = load_backbone(self.paths["backbone"])
        branch = load_branch(self.paths["branch"], backbone)
        readout = load_readout(self.paths["readout"])
        timesteps = self.config.kps.sample_timesteps or backbone.config.timesteps
        schedule = NoiseSchedule.cosine(timesteps)
        return diffusion_generator(backbone, branch, readout, music_scale, schedule)

    def tradeoff_grid(self, music_pool):
        cfg = self.config
        grid = []
        rng = np.random.default_rng(stable_seed(cfg.seed, "tradeoff"))
        for text_on in (0, 1):
            for scale in cfg.tradeoff.music_scales:
                generator = self.build_generator(music_scale=scale)
                feats, bas_scores = [], []
                hits = {}
                trials = {}
                n = cfg.tradeoff.samples_per_cell
                for i in range(n):
                    prompt = KPS_PROMPTS[i % len(KPS_PROMPTS)]
                    music = music_pool[int(rng.integers(len(music_pool)))]
                    sample_seed = stable_seed(cfg.seed, "tradeoff", text_on, scale, i)
                    seq = generator(music, prompt if text_on else None, sample_seed)
                    feats.append(seq.positions.mean(axis=0).ravel())
                    bas_scores.append(beat_alignment_score(
                        kinematic_beats(seq), music["beat_times"]))
                    if text_on:
                        from .kps import eval_predicate
                        family = FAMILIES[prompt]
                        null_seq = generator(music, None, sample_seed)
                        trials[family] = trials.get(family, 0) + 1
                        hits[family] = hits.get(family, 0) + (
                            int(eval_predicate(prompt, seq).passed)
                            - int(eval_predicate(prompt, null_seq).passed))
                cell = {
                    "text": text_on,
                    "music": float(scale),
                    "diversity": diversity(feats),
                    "bas": float(np.mean(bas_scores)),
                }
                if text_on:
                    cell["lifts"] = {fam: hits[fam] / trials[fam] for fam in trials}
                grid.append(cell)
        return grid

    def run(self, stages=None):
        requested = list(stages or STAGES)
        unknown = [s for s in requested if s not in STAGES]
        if unknown:
            raise UserInputError(f"unknown stages: {unknown}")
        produced = {}
        for stage in STAGES:
            if stage not in requested:
                continue
            produced[stage] = [str(p) for p in getattr(self, f"stage_{stage}")()]
        return produced


def run_pipeline(config: PipelineConfig, stages=None) -> dict:
    """Execute the requested stages in dependency order; returns output paths."""
    return Pipeline(config).run(stages)


# ---------------------------------------------------------------------------
# Generator handles for the evaluation protocol

def diffusion_generator(backbone, branch, readout, music_scale: float,
                        schedule: NoiseSchedule):
    """(music, text_or_None, seed) -> JointSequence through the trained stack."""

    def generate(music, text, seed):
        c_music = np.asarray(music["features"]) if music is not None else None
        c_text = text_condition_tokens(text) if text else None
        clip = cfg_sample(backbone, branch, c_music, c_text, music_scale=music_scale,
                          schedule=schedule, seed=seed)
        return sequence_from_clip(readout, clip)

    return generate


def oracle_generator(music, text, seed):
    """Emits the prompted primitive when text is given, an idle clip otherwise."""
    name = text if text is not None else "idle"
    return synthesize(PrimitiveSpec(name, CALIBRATED_MAGNITUDES[name], seed=seed))


def text_ignoring_generator(music, text, seed):
    """Ignores text entirely; matched seeds produce identical sequences."""
    name = PRIMITIVES[seed % len(PRIMITIVES)]
    return synthesize(PrimitiveSpec(name, seed=seed))


def load_generator(spec, base_dir="."):
    """Build a generator handle from a JSON spec file or dict.

    Kinds: ``diffusion`` (paths to backbone/branch/readout checkpoints plus a
    guidance scale), ``oracle``, and ``text_ignoring``.
    """
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    kind = spec.get("kind")
    if kind == "oracle":
        return oracle_generator
    if kind == "text_ignoring":
        return text_ignoring_generator
    if kind == "diffusion":
        base = Path(base_dir)
        backbone = load_backbone(base / spec["backbone"])
        branch = load_branch(base / spec["branch"], backbone)
        readout = load_readout(base / spec["readout"])
        timesteps = spec.get("sample_timesteps") or backbone.config.timesteps
        return diffusion_generator(backbone, branch, readout,
                                   music_scale=float(spec.get("scale", 3.0)),
                                   schedule=NoiseSchedule.cosine(timesteps))
    raise UserInputError(f"unknown generator kind {kind!r}")
