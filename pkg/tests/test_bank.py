import numpy as np
import pytest
import torch

from choreokit.align import AlignConfig, AlignmentSpace
from choreokit.bank import (
    Bank,
    BankEntry,
    PseudoTriplet,
    build_bank,
    load_bank,
    make_pseudo_triplets,
    retrieval_stats,
    retrieve,
    save_bank,
)
from choreokit.corpus import assemble_corpus
from choreokit.errors import BankMismatchError, EmptyBankError, UserInputError


def _unit(rng, dim=16):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _bank_from_embeddings(embeddings, kind="TM", threshold=0.8, payloads=None):
    entries = tuple(
        BankEntry(embedding=np.asarray(e), payload=payloads[i] if payloads else {"text": f"item {i}"},
                  source_id=i)
        for i, e in enumerate(embeddings)
    )
    return Bank(kind=kind, dim=len(embeddings[0]), entries=entries, threshold=threshold)


@pytest.fixture(scope="module")
def frozen_space():
    torch.manual_seed(77)
    return AlignmentSpace(AlignConfig(seed=77)).freeze()


@pytest.fixture(scope="module")
def small_corpus(frozen_space):
    items = assemble_corpus("music_dance", 8, seed=41)
    return [it.with_embedding(frozen_space.embed("motion", it.motion_tokens))
            for it in items]


class TestBuildBank:
    def test_one_entry_per_item(self, small_corpus, frozen_space):
        bank = build_bank(small_corpus, frozen_space, "MD")
        assert len(bank) == 8
        assert all(abs(np.linalg.norm(e.embedding) - 1.0) < 1e-6 for e in bank.entries)

    def test_rebuild_is_identical(self, small_corpus, frozen_space):
        a = build_bank(small_corpus, frozen_space, "MD")
        b = build_bank(small_corpus, frozen_space, "MD")
        assert np.array_equal(a.matrix, b.matrix)
        assert [e.source_id for e in a.entries] == [e.source_id for e in b.entries]

    def test_empty_corpus(self, frozen_space):
        with pytest.raises(EmptyBankError):
            build_bank([], frozen_space, "MD")

    def test_kind_checked(self, small_corpus, frozen_space):
        with pytest.raises(BankMismatchError):
            build_bank(small_corpus, frozen_space, "XX")


class TestRetrieve:
    def test_self_retrieval_similarity_one(self, small_corpus, frozen_space):
        bank = build_bank(small_corpus, frozen_space, "MD")
        payload, sim = retrieve(bank, small_corpus[3].motion_embedding)
        assert sim == pytest.approx(1.0, abs=1e-9)
        assert payload["genre"] == small_corpus[3].genre

    def test_orthogonal_query_returns_none(self):
        dim = 16
        basis = np.eye(dim)
        bank = _bank_from_embeddings([basis[0], basis[1]], threshold=0.8)
        assert retrieve(bank, basis[5]) is None

    def test_constructed_similarities(self):
        # Entries at exact cosines 0.85 and 0.79 to the query.
        query = np.zeros(16)
        query[0] = 1.0
        e1 = np.array([0.85] + [np.sqrt(1 - 0.85**2)] + [0.0] * 14)
        e2 = np.array([0.79, 0.0, np.sqrt(1 - 0.79**2)] + [0.0] * 13)
        bank = _bank_from_embeddings([e1, e2], threshold=0.8,
                                     payloads=[{"text": "first"}, {"text": "second"}])
        payload, sim = retrieve(bank, query)
        assert payload["text"] == "first"
        assert sim == pytest.approx(0.85, abs=1e-12)

    def test_tie_breaks_to_lowest_source_id(self):
        v = np.zeros(16)
        v[0] = 1.0
        entries = (BankEntry(embedding=v, payload={"text": "late"}, source_id=7),
                   BankEntry(embedding=v, payload={"text": "early"}, source_id=2))
        bank = Bank(kind="TM", dim=16, entries=entries, threshold=0.5)
        payload, _ = retrieve(bank, v)
        assert payload["text"] == "early"

    def test_brute_force_equivalence(self, small_corpus, frozen_space):
        bank = build_bank(small_corpus, frozen_space, "MD", threshold=0.5)
        rng = np.random.default_rng(42)
        for _ in range(200):
            q = _unit(rng)
            sims = np.array([float(np.dot(e.embedding, q)) for e in bank.entries])
            best = int(np.argmax(sims))
            expected = None if sims[best] < bank.threshold \
                else (bank.entries[best].payload, sims[best])
            got = retrieve(bank, q)
            if expected is None:
                assert got is None
            else:
                assert got[0] is expected[0] and got[1] == pytest.approx(expected[1])

    def test_threshold_monotonicity(self, small_corpus, frozen_space):
        rng = np.random.default_rng(43)
        queries = [_unit(rng) for _ in range(50)]
        rates = []
        for tau in (0.2, 0.4, 0.6, 0.8, 0.95):
            bank = build_bank(small_corpus, frozen_space, "MD", threshold=tau)
            rates.append(sum(retrieve(bank, q) is not None for q in queries))
        assert all(rates[i] >= rates[i + 1] for i in range(len(rates) - 1))


class TestPseudoTriplets:
    def test_text_motion_retrieves_music(self, small_corpus, frozen_space):
        bank_md = build_bank(small_corpus, frozen_space, "MD", threshold=0.5)
        mo = assemble_corpus("text_motion", 8, seed=42)
        mo = [it.with_embedding(frozen_space.embed("motion", it.motion_tokens)) for it in mo]
        triplets = make_pseudo_triplets(mo, "text_motion", {"MD": bank_md})
        assert len(triplets) == 8
        for trip, item in zip(triplets, mo):
            assert trip.text_cond == item.label
            assert trip.provenance["text"] == "native_pair"
            if trip.provenance["music"] == "retrieved":
                assert trip.similarity >= bank_md.threshold
                assert trip.music_cond is not None

    def test_composite_instruction_string(self):
        v = np.zeros(16)
        v[0] = 1.0
        bank_tm = _bank_from_embeddings([v], payloads=[{"text": "walk forward"}],
                                        threshold=0.8)
        item = type("Item", (), {
            "motion_embedding": v,
            "features": np.zeros((4, 46)),
            "music": {"features": np.zeros((4, 32))},
            "genre": "popping",
            "label": "walk_move",
        })()
        triplets = make_pseudo_triplets([item], "music_dance", {"TM": bank_tm},
                                        genre_tags=["popping"])
        assert triplets[0].text_cond == "walk forward, popping"
        assert triplets[0].provenance == {"music": "native_pair", "text": "retrieved"}

    def test_all_orthogonal_queries_null_filled(self, small_corpus, frozen_space):
        bank_md = build_bank(small_corpus, frozen_space, "MD", threshold=0.99999)
        mo = assemble_corpus("text_motion", 4, seed=43)
        mo = [it.with_embedding(frozen_space.embed("motion", it.motion_tokens)) for it in mo]
        triplets = make_pseudo_triplets(mo, "text_motion", {"MD": bank_md})
        assert all(t.provenance["music"] == "null_filled" for t in triplets)
        assert all(t.music_cond is None and t.similarity is None for t in triplets)

    def test_no_triplet_carries_subthreshold_similarity(self, small_corpus, frozen_space):
        bank_md = build_bank(small_corpus, frozen_space, "MD", threshold=0.8)
        mo = assemble_corpus("text_motion", 16, seed=44)
        mo = [it.with_embedding(frozen_space.embed("motion", it.motion_tokens)) for it in mo]
        for trip in make_pseudo_triplets(mo, "text_motion", {"MD": bank_md}):
            if trip.similarity is not None:
                assert trip.similarity >= 0.8

    def test_kind_bank_mismatch(self, small_corpus, frozen_space):
        bank_md = build_bank(small_corpus, frozen_space, "MD")
        with pytest.raises(BankMismatchError):
            make_pseudo_triplets(small_corpus, "music_dance", {"MD": bank_md})
        with pytest.raises(UserInputError):
            make_pseudo_triplets(small_corpus, "nonsense", {"MD": bank_md})

    def test_triplet_invariants(self):
        with pytest.raises(UserInputError):
            PseudoTriplet(motion_features=np.zeros((2, 4)), music_cond=None,
                          text_cond=None, provenance={"music": "null_filled",
                                                      "text": "null_filled"})
        with pytest.raises(UserInputError):
            PseudoTriplet(motion_features=np.zeros((2, 4)), music_cond=np.zeros((2, 3)),
                          text_cond="x", provenance={"music": "retrieved",
                                                     "text": "native_pair"})


class TestRetrievalStats:
    def test_schema_and_exact_rates(self):
        basis = np.eye(16)
        bank_a = _bank_from_embeddings([basis[0]], kind="MD",
                                       payloads=[{"music": np.zeros((2, 3)), "genre": "g",
                                                  "beat_times": []}])
        bank_b = _bank_from_embeddings([basis[1]], kind="TM")
        # queries with known top-1 similarities to bank_b / bank_a
        def at_sim(target, s, other_axis):
            v = s * target + np.sqrt(1 - s * s) * basis[other_axis]
            return v
        queries_a = [at_sim(basis[1], s, 5 + i) for i, s in enumerate((0.7, 0.85, 0.9, 0.95))]
        queries_b = [at_sim(basis[0], s, 9 + i) for i, s in enumerate((0.81, 0.99))]
        stats = retrieval_stats(bank_a, bank_b, queries_a, queries_b, threshold=0.8)
        d = stats.directions["MD->TM"]
        assert set(d["similarity"]) == {"min", "p10", "median", "p90", "max", "mean"}
        assert d["acceptance_rate"] == 0.75
        assert d["null_replaced_rate"] == 1.0 - d["acceptance_rate"]
        assert d["similarity"]["median"] == pytest.approx(0.875, abs=1e-12)
        assert d["similarity"]["min"] == pytest.approx(0.7, abs=1e-12)
        assert d["similarity"]["max"] == pytest.approx(0.95, abs=1e-12)
        assert stats.directions["TM->MD"]["acceptance_rate"] == 1.0

    def test_identical_queries_full_acceptance(self, small_corpus, frozen_space):
        bank = build_bank(small_corpus, frozen_space, "MD")
        embs = [it.motion_embedding for it in small_corpus]
        stats = retrieval_stats(bank, bank, embs, embs, threshold=0.8)
        for direction in stats.directions.values():
            assert direction["acceptance_rate"] == 1.0
            assert direction["similarity"]["min"] == pytest.approx(1.0, abs=1e-9)

    def test_percentiles_non_decreasing(self, small_corpus, frozen_space):
        bank = build_bank(small_corpus, frozen_space, "MD")
        rng = np.random.default_rng(45)
        queries = [_unit(rng) for _ in range(30)]
        stats = retrieval_stats(bank, bank, queries, queries)
        for direction in stats.directions.values():
            s = direction["similarity"]
            ordered = [s["min"], s["p10"], s["median"], s["p90"], s["max"]]
            assert all(ordered[i] <= ordered[i + 1] for i in range(4))


class TestBankFiles:
    def test_round_trip(self, small_corpus, frozen_space, tmp_path):
        bank = build_bank(small_corpus, frozen_space, "MD", threshold=0.8)
        path = tmp_path / "bank.json"
        save_bank(path, bank)
        loaded = load_bank(path)
        assert loaded.kind == "MD" and loaded.threshold == 0.8
        assert np.array_equal(loaded.matrix, bank.matrix)
        assert np.array_equal(loaded.entries[0].payload["music"],
                              bank.entries[0].payload["music"])
