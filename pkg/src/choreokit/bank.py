"""Immutable embedding banks with thresholded nearest-neighbour retrieval.

A bank indexes one corpus by frozen motion embeddings and carries the paired
modality as payload: the MD bank holds music features keyed by dance-motion
embeddings, the TM bank holds text descriptions keyed by motion embeddings.
Retrieval is an exhaustive cosine argmax (exactness is an invariant here, so
no approximate index); matches under the similarity threshold return nothing
and downstream conditions fall back to null.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BankMismatchError, EmptyBankError, UserInputError

BANK_KINDS = ("MD", "TM")
DEFAULT_SIMILARITY_THRESHOLD = 0.8

_EPS = 1e-6


@dataclass(frozen=True)
class BankEntry:
    embedding: np.ndarray
    payload: dict
    source_id: int


@dataclass(frozen=True)
class Bank:
    kind: str
    dim: int
    entries: tuple
    threshold: float = DEFAULT_SIMILARITY_THRESHOLD

    def __post_init__(self):
        if self.kind not in BANK_KINDS:
            raise BankMismatchError(f"bank kind must be one of {BANK_KINDS}")
        if not self.entries:
            raise EmptyBankError("bank has no entries")
        if not 0.0 < self.threshold <= 1.0:
            raise UserInputError("threshold must lie in (0, 1]")
        ordered = tuple(sorted(self.entries, key=lambda e: e.source_id))
        matrix = np.stack([np.asarray(e.embedding, dtype=np.float64) for e in ordered])
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise UserInputError(f"embeddings must be ({self.dim},) vectors")
        norms = np.linalg.norm(matrix, axis=1)
        if np.abs(norms - 1.0).max() > _EPS:
            raise UserInputError("bank embeddings must be unit-norm")
        matrix.setflags(write=False)
        object.__setattr__(self, "entries", ordered)
        object.__setattr__(self, "_matrix", matrix)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        """Embeddings stacked in ascending source_id order."""
        return self._matrix


def _check_query(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape != (dim,):
        raise UserInputError(f"query must be a ({dim},) vector")
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise UserInputError("query has zero norm")
    if abs(norm - 1.0) > _EPS:
        warnings.warn("non-unit retrieval query; normalising", stacklevel=3)
        q = q / norm
    return q


def build_bank(corpus, space, kind: str,
               threshold: float = DEFAULT_SIMILARITY_THRESHOLD) -> Bank:
    """Index a corpus under a frozen alignment space.

    Each item contributes its live-path motion embedding as key; the payload
    is the paired modality (music features and genre for MD, the text
    description for TM).
    """
    if kind not in BANK_KINDS:
        raise BankMismatchError(f"bank kind must be one of {BANK_KINDS}")
    corpus = list(corpus)
    if not corpus:
        raise EmptyBankError("cannot build a bank from an empty corpus")
    entries = []
    for item in corpus:
        embedding = space.embed("motion", item.motion_tokens)
        if kind == "MD":
            if item.music is None:
                raise BankMismatchError("MD bank items must carry paired music")
            payload = {"music": np.asarray(item.music["features"]),
                       "genre": item.genre,
                       "beat_times": list(item.music["beat_times"])}
        else:
            payload = {"text": item.description}
        entries.append(BankEntry(embedding=embedding, payload=payload,
                                 source_id=item.source_id))
    dim = entries[0].embedding.shape[0]
    return Bank(kind=kind, dim=dim, entries=entries, threshold=threshold)


def retrieve(bank: Bank, query):
    """Exhaustive cosine argmax; None when the best similarity is below threshold.

    Exact similarity ties resolve to the lowest source_id.
    """
    q = _check_query(query, bank.dim)
    sims = bank.matrix @ q
    best = int(np.argmax(sims))  # first maximum, entries sorted by source_id
    if sims[best] < bank.threshold:
        return None
    return bank.entries[best].payload, float(sims[best])


@dataclass(frozen=True)
class PseudoTriplet:
    """A (motion, music, text) training sample with one imputed condition."""

    motion_features: np.ndarray
    music_cond: np.ndarray | None
    text_cond: str | None
    provenance: dict
    similarity: float | None = None

    def __post_init__(self):
        if "native_pair" not in self.provenance.values():
            raise UserInputError("at least one condition must be native")
        if "retrieved" in self.provenance.values() and self.similarity is None:
            raise UserInputError("retrieved conditions must carry a similarity")
        if "retrieved" not in self.provenance.values() and self.similarity is not None:
            raise UserInputError("similarity only accompanies retrieved conditions")


def make_pseudo_triplets(batch, source_kind: str, banks: dict,
                         genre_tags=None) -> list:
    """Impute each item's missing condition by cross-bank retrieval.

    Text-motion items retrieve music from the MD bank; music-dance items
    retrieve a description from the TM bank and compose the instruction as
    ``"<description>, <genre tag>"``. Sub-threshold retrievals become null
    conditions.
    """
    if source_kind not in ("text_motion", "music_dance"):
        raise UserInputError(f"unknown source kind {source_kind!r}")
    target = "MD" if source_kind == "text_motion" else "TM"
    bank = banks.get(target)
    if bank is None or bank.kind != target:
        raise BankMismatchError(f"need a {target} bank for {source_kind} batches")
    batch = list(batch)
    if genre_tags is not None and len(genre_tags) != len(batch):
        raise UserInputError("genre_tags must match the batch length")

    triplets = []
    for i, item in enumerate(batch):
        if item.motion_embedding is None:
            raise UserInputError("batch items need precomputed motion embeddings")
        hit = retrieve(bank, item.motion_embedding)
        if source_kind == "text_motion":
            if hit is None:
                music, provenance, sim = None, "null_filled", None
            else:
                music, sim = np.asarray(hit[0]["music"]), hit[1]
                provenance = "retrieved"
            triplets.append(PseudoTriplet(
                motion_features=item.features, music_cond=music, text_cond=item.label,
                provenance={"music": provenance, "text": "native_pair"}, similarity=sim))
        else:
            genre = genre_tags[i] if genre_tags is not None else item.genre
            if hit is None:
                text, provenance, sim = None, "null_filled", None
            else:
                text, sim = f"{hit[0]['text']}, {genre}", hit[1]
                provenance = "retrieved"
            music = np.asarray(item.music["features"])
            triplets.append(PseudoTriplet(
                motion_features=item.features, music_cond=music, text_cond=text,
                provenance={"music": "native_pair", "text": provenance}, similarity=sim))
    return triplets


@dataclass(frozen=True)
class RetrievalStats:
    """Raw top-1 similarity distribution and acceptance rates per direction."""

    directions: dict
    threshold: float

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "directions": self.directions}


def _direction_stats(bank: Bank, queries, tau: float) -> dict:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] == 0:
        raise UserInputError("each direction needs at least one query")
    sims = np.array([(bank.matrix @ _check_query(q, bank.dim)).max() for q in queries])
    acceptance = float(np.count_nonzero(sims >= tau) / sims.size)
    return {
        "count": int(sims.size),
        "acceptance_rate": acceptance,
        "null_replaced_rate": 1.0 - acceptance,
        "similarity": {
            "min": float(sims.min()),
            "p10": float(np.percentile(sims, 10)),
            "median": float(np.percentile(sims, 50)),
            "p90": float(np.percentile(sims, 90)),
            "max": float(sims.max()),
            "mean": float(sims.mean()),
        },
    }


def retrieval_stats(bank_a: Bank, bank_b: Bank, queries_a, queries_b,
                    threshold: float | None = None) -> RetrievalStats:
    """Pre-threshold top-1 similarity percentiles plus acceptance, both ways.

    ``queries_a`` come from bank_a's corpus and search bank_b, and vice versa.
    Percentiles interpolate linearly between order statistics (midpoint for
    even counts).
    """
    tau = bank_a.threshold if threshold is None else float(threshold)
    directions = {
        f"{bank_a.kind}->{bank_b.kind}": _direction_stats(bank_b, queries_a, tau),
        f"{bank_b.kind}->{bank_a.kind}": _direction_stats(bank_a, queries_b, tau),
    }
    return RetrievalStats(directions=directions, threshold=tau)


# ---------------------------------------------------------------------------
# Bank files

def save_bank(path, bank: Bank):
    entries = []
    for e in bank.entries:
        payload = {}
        for key, value in e.payload.items():
            payload[key] = value.tolist() if isinstance(value, np.ndarray) else value
        entries.append({"embedding": e.embedding.tolist(), "payload": payload,
                        "source_id": e.source_id})
    data = {"kind": bank.kind, "dim": bank.dim, "threshold": bank.threshold,
            "entries": entries}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data))


def load_bank(path) -> Bank:
    data = json.loads(Path(path).read_text())
    entries = []
    for e in data["entries"]:
        payload = dict(e["payload"])
        if "music" in payload:
            payload["music"] = np.asarray(payload["music"], dtype=np.float64)
        entries.append(BankEntry(embedding=np.asarray(e["embedding"], dtype=np.float64),
                                 payload=payload, source_id=e["source_id"]))
    return Bank(kind=data["kind"], dim=int(data["dim"]), entries=tuple(entries),
                threshold=float(data["threshold"]))
