"""Synthetic condition features and desk-scale corpus assembly.

Pretrained text/music encoders are out of scope, so condition features are
generated deterministically:

* music: per-genre sinusoidal feature banks (frame-aligned, with a pulse
  channel at the genre's tempo) mixed with primitive-keyed channels so that
  paired music carries a recoverable class signal, plus per-item phase jitter;
* text: hash-seeded Gaussian embeddings per whitespace/comma token;
* motion tokens: channel-bucket means of generator features, subsampled in
  time.

A corpus item bundles one synthesized motion with its paired modality and is
the unit indexed by the embedding banks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UserInputError
from .seeding import stable_seed
from .synth import CALIBRATED_MAGNITUDES, GENRES, PRIMITIVES, PrimitiveSpec, synthesize

CONDITION_DIM = 32
MOTION_TOKEN_COUNT = 16

_WORD_SPLIT = re.compile(r"[\s,]+")


INTENSITY_WORDS = (
    "barely", "gently", "softly", "mildly", "plainly",
    "firmly", "strongly", "sharply", "fiercely",
)


def intensity_word(factor: float) -> str:
    """Discretise a magnitude factor to a graded adverb."""
    lo, hi = 0.5, 1.5
    bin_idx = int(np.clip((factor - lo) / (hi - lo) * len(INTENSITY_WORDS), 0,
                          len(INTENSITY_WORDS) - 1))
    return INTENSITY_WORDS[bin_idx]


def music_condition(genre: str, primitive: str, frames: int, fps: int = 30,
                    dim: int = CONDITION_DIM, seed: int = 0,
                    intensity: float = 1.0) -> dict:
    """Frame-aligned synthetic music features with analytic beat times.

    Channel 0 pulses at the genre tempo. The first half of the remaining
    channels encode the genre, the second half the paired primitive, each as
    a sinusoid riding on a tag-keyed band level; the levels survive temporal
    mean pooling, which is what the alignment encoders apply. ``intensity``
    scales the primitive band the way paired music tracks the energy of the
    motion it accompanies, and per-item phase jitter keeps items distinct.
    """
    if frames < 1 or dim < 4:
        raise UserInputError("music condition needs frames >= 1 and dim >= 4")
    t = np.arange(frames) / float(fps)
    bpm = 84 + 6 * (stable_seed("bpm", genre) % 10)
    features = np.zeros((frames, dim))
    features[:, 0] = np.cos(2.0 * np.pi * (bpm / 60.0) * t)

    jitter_rng = np.random.default_rng(seed)
    n_genre = max(2, (dim - 1) // 4)
    bands = ((range(1, 1 + n_genre), genre, 1.0),
             (range(1 + n_genre, dim), primitive, float(intensity)))
    for channels, tag, gain in bands:
        rng = np.random.default_rng(stable_seed("music", tag))
        for c in channels:
            freq = rng.uniform(0.5, 4.0)
            phase = rng.uniform(0.0, 2.0 * np.pi) + jitter_rng.uniform(-0.3, 0.3)
            level = rng.uniform(-1.0, 1.0)
            amp = rng.uniform(0.3, 0.7)
            features[:, c] = gain * level + amp * np.sin(2.0 * np.pi * freq * t + phase)

    duration = frames / float(fps)
    beat_times = np.arange(0.0, duration, 60.0 / bpm).tolist()
    return {
        "genre": genre,
        "bpm": int(bpm),
        "fps": int(fps),
        "frames": int(frames),
        "dim": int(dim),
        "features": features,
        "beat_times": beat_times,
    }


def text_condition_tokens(prompt: str, dim: int = CONDITION_DIM) -> np.ndarray:
    """One hash-seeded embedding row per token of the prompt."""
    words = [w for w in _WORD_SPLIT.split(prompt.strip()) if w]
    if not words:
        raise UserInputError("prompt must contain at least one token")
    rows = [np.random.default_rng(stable_seed("text", w)).normal(size=dim) for w in words]
    return np.stack(rows)


# Typical per-channel motion deviation in skeleton units; fixed so that token
# magnitudes are O(1) and clip-independent.
MOTION_TOKEN_SCALE = 0.05
_TOKEN_BASELINE_FRAMES = 10

# Corpora cycle the eight action primitives; the idle generator only serves as
# the null-motion oracle and carries no within-class signal worth indexing.
CORPUS_PRIMITIVES = tuple(p for p in PRIMITIVES if p != "idle")

# Corpus magnitudes span half to one-and-a-half times the calibrated values:
# wide enough that items of one primitive are geometrically distinguishable
# in the embedding space (the generator corpus needs the diversity too).
MAGNITUDE_SPREAD = (0.5, 1.5)


def motion_condition_tokens(features: np.ndarray, n_tokens: int = MOTION_TOKEN_COUNT,
                            dim: int = CONDITION_DIM) -> np.ndarray:
    """Downsample generator features to alignment tokens (time and channels).

    Channels hold deviations from the clip's opening pose (mean of the first
    10 frames) over a fixed deviation scale; the shared rest pose would
    otherwise dominate every clip and collapse the embedding space, while
    deviations from the opening pose keep their temporal mean and survive the
    encoders' mean pooling. The last channel is the log deviation energy,
    which makes the overall movement scale linearly recoverable instead of
    hiding it in vector length (unit-normalised embeddings drop lengths).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise UserInputError("features must be (frames, dim)")
    buckets = np.array_split(np.arange(feats.shape[1]), dim - 1)
    pooled = np.stack([feats[:, b].mean(axis=1) for b in buckets], axis=1)
    baseline = pooled[:_TOKEN_BASELINE_FRAMES].mean(axis=0, keepdims=True)
    pooled = (pooled - baseline) / MOTION_TOKEN_SCALE
    energy = np.log1p(np.linalg.norm(pooled, axis=1, keepdims=True))
    tokens = np.concatenate([pooled, energy], axis=1)
    idx = np.linspace(0, feats.shape[0] - 1, min(n_tokens, feats.shape[0]))
    return tokens[np.round(idx).astype(int)]


@dataclass(frozen=True)
class CorpusItem:
    """One motion with its paired modality and precomputed condition tokens."""

    source_id: int
    label: str                      # primitive name; the canonical prompt text
    description: str                # graded text description (text-motion pairing)
    genre: str
    positions: np.ndarray           # (frames, 22, 3)
    features: np.ndarray            # generator features (frames, F)
    motion_tokens: np.ndarray       # alignment tokens (T, CONDITION_DIM)
    music: dict | None = None       # music_condition() payload, music-dance only
    motion_embedding: np.ndarray | None = None  # filled once a space is frozen

    def with_embedding(self, embedding: np.ndarray) -> "CorpusItem":
        return CorpusItem(self.source_id, self.label, self.description, self.genre,
                          self.positions, self.features, self.motion_tokens,
                          self.music, embedding)


def assemble_corpus(kind: str, n_items: int, seed: int, duration_s: float = 4.0,
                    fps: int = 30) -> list:
    """Build a labelled synthetic corpus of the given kind.

    ``kind`` is ``music_dance`` (items carry paired music) or ``text_motion``
    (items carry only their text label). Primitives and genres cycle;
    magnitudes jitter +/-15% around the calibrated values, which stays inside
    every predicate margin.
    """
    from .diffusion import toy_features_from_sequence  # local: avoids cycle at import

    if kind not in ("music_dance", "text_motion"):
        raise UserInputError(f"unknown corpus kind {kind!r}")
    if n_items < 1:
        raise UserInputError("n_items must be >= 1")
    items = []
    for i in range(n_items):
        primitive = CORPUS_PRIMITIVES[i % len(CORPUS_PRIMITIVES)]
        genre = GENRES[i % len(GENRES)]
        item_seed = stable_seed(seed, kind, i)
        rng = np.random.default_rng(item_seed)
        factor = rng.uniform(*MAGNITUDE_SPREAD)
        magnitude = CALIBRATED_MAGNITUDES[primitive] * factor
        seq = synthesize(PrimitiveSpec(primitive, magnitude, duration_s=duration_s,
                                       seed=item_seed), fps)
        feats = toy_features_from_sequence(seq)
        music = None
        if kind == "music_dance":
            music = music_condition(genre, primitive, seq.frames, fps, seed=item_seed,
                                    intensity=factor)
        items.append(CorpusItem(
            source_id=i,
            label=primitive,
            description=f"{primitive} {intensity_word(factor)}",
            genre=genre,
            positions=seq.positions,
            features=feats,
            motion_tokens=motion_condition_tokens(feats),
            music=music,
        ))
    return items


def music_tokens(music: dict, n_tokens: int = MOTION_TOKEN_COUNT) -> np.ndarray:
    """Alignment tokens for a music payload (time-subsampled features)."""
    feats = np.asarray(music["features"], dtype=np.float64)
    idx = np.linspace(0, feats.shape[0] - 1, min(n_tokens, feats.shape[0]))
    return feats[np.round(idx).astype(int)]


def alignment_pairs(items) -> tuple[list, list]:
    """(condition_tokens, motion_tokens) pairs for contrastive training.

    Music-dance items pair subsampled music features with the motion; the
    text-motion items pair the tokenised description.
    """
    pairs = []
    for item in items:
        if item.music is not None:
            cond = music_tokens(item.music)
        else:
            cond = text_condition_tokens(item.description)
        pairs.append((cond, item.motion_tokens))
    labels = [item.label for item in items]
    return pairs, labels


# ---------------------------------------------------------------------------
# Music file format

def write_music(path, music: dict):
    payload = dict(music)
    payload["features"] = np.asarray(music["features"]).ravel().tolist()
    Path(path).write_text(json.dumps(payload))


def read_music(path) -> dict:
    payload = json.loads(Path(path).read_text())
    frames, dim = int(payload["frames"]), int(payload["dim"])
    payload["features"] = np.asarray(payload["features"], dtype=np.float64).reshape(frames, dim)
    return payload
