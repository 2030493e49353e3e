import numpy as np
import pytest
import torch

from choreokit import serial
from choreokit.corpus import assemble_corpus, text_condition_tokens
from choreokit.diffusion import (
    TOY_CONTACT_MAP,
    TOY_FEATURE_DIM,
    GenConfig,
    LossWeights,
    NoiseSchedule,
    backbone_forward,
    build_backbone,
    build_control_branch,
    cfg_sample,
    controlled_forward,
    dance_loss,
    diffuse_with_alpha_bar,
    fit_position_readout,
    forward_diffuse,
    load_backbone,
    load_branch,
    partition_channels,
    positions_from_features,
    save_backbone,
    save_branch,
    sequence_from_clip,
    toy_features_from_sequence,
    train_backbone,
)
from choreokit.errors import DimensionError, UserInputError
from choreokit.motion import detect_axes
from choreokit.synth import PrimitiveSpec, synthesize

SMALL = GenConfig(frames=24, timesteps=20, seed=0)


@pytest.fixture(scope="module")
def model():
    return build_backbone(SMALL)


@pytest.fixture(scope="module")
def branch(model):
    return build_control_branch(model)


class TestSchedule:
    @pytest.mark.parametrize("timesteps", [20, 50, 1000])
    def test_invariants(self, timesteps):
        sched = NoiseSchedule.cosine(timesteps)
        ab = sched.alpha_bar
        assert ab[0] >= 0.99 and ab[-1] <= 0.01
        assert ab.min() > 0.0 and ab.max() < 1.0
        assert (np.diff(ab) < 0).all()

    def test_rejects_non_monotone(self):
        with pytest.raises(UserInputError):
            NoiseSchedule(alpha_bar=np.array([0.995, 0.5, 0.5, 0.005]))


class TestForwardDiffuse:
    def test_alpha_bar_limits(self):
        rng = np.random.default_rng(0)
        x0, eps = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        assert np.array_equal(diffuse_with_alpha_bar(x0, 1.0, eps), x0)
        assert np.array_equal(diffuse_with_alpha_bar(x0, 0.0, eps), eps)

    def test_scalar_hand_value(self):
        out = diffuse_with_alpha_bar(np.array(2.0), 0.25, np.array(1.0))
        assert out == pytest.approx(1.8660, abs=1e-4)

    def test_schedule_indexing_and_errors(self):
        sched = NoiseSchedule.cosine(20)
        rng = np.random.default_rng(1)
        x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        expected = diffuse_with_alpha_bar(x0, float(sched.alpha_bar[4]), eps)
        assert np.array_equal(forward_diffuse(x0, 5, eps, sched), expected)
        with pytest.raises(UserInputError):
            forward_diffuse(x0, 0, eps, sched)
        with pytest.raises(UserInputError):
            forward_diffuse(x0, 21, eps, sched)
        with pytest.raises(DimensionError):
            forward_diffuse(x0, 5, eps[:2], sched)

    def test_moment_statistics(self):
        sched = NoiseSchedule.cosine(50)
        t = 25
        ab = float(sched.alpha_bar[t - 1])
        rng = np.random.default_rng(2)
        x0 = 1.7
        draws = np.array([diffuse_with_alpha_bar(np.array(x0), ab, e)
                          for e in rng.normal(size=10_000)])
        se = np.sqrt(1.0 - ab) / np.sqrt(draws.size)
        assert abs(draws.mean() - np.sqrt(ab) * x0) < 3 * se
        assert abs(draws.var() - (1.0 - ab)) < 0.05 * (1.0 - ab)


class TestBackboneForward:
    def test_output_shape_matches_input(self, model):
        rng = np.random.default_rng(3)
        out = backbone_forward(model, rng.normal(size=(24, TOY_FEATURE_DIM)), 5,
                               rng.normal(size=(24, 32)))
        assert tuple(out.shape) == (24, TOY_FEATURE_DIM)
        assert torch.isfinite(out).all()

    def test_determinism(self, model):
        rng = np.random.default_rng(4)
        x_t = rng.normal(size=(24, TOY_FEATURE_DIM))
        c_m = rng.normal(size=(24, 32))
        assert torch.equal(backbone_forward(model, x_t, 7, c_m),
                           backbone_forward(model, x_t, 7, c_m))

    def test_channel_partition_covers_everything(self):
        for dim, groups in ((46, 7), (319, 7), (10, 3)):
            parts = partition_channels(dim, groups)
            flat = [c for part in parts for c in part]
            assert sorted(flat) == list(range(dim))
            assert len(parts) == groups

    def test_group_isolation_pre_fusion(self, model):
        # Permuting channels inside one group changes only that group's
        # pre-fusion features (fusion weights are irrelevant to the check).
        rng = np.random.default_rng(5)
        x = torch.as_tensor(rng.normal(size=(1, 24, TOY_FEATURE_DIM)))
        group = list(model.encoder.partition[2])
        x_perm = x.clone()
        x_perm[..., group] = x_perm[..., list(reversed(group))]
        feats = model.encoder.group_features(x)
        feats_perm = model.encoder.group_features(x_perm)
        for idx, (a, b) in enumerate(zip(feats, feats_perm)):
            if idx == 2:
                assert not torch.equal(a, b)
            else:
                assert torch.equal(a, b)


class TestControlledForward:
    def test_zero_init_is_function_preserving(self, model, branch):
        rng = np.random.default_rng(6)
        for _ in range(5):
            x_t = rng.normal(size=(24, TOY_FEATURE_DIM))
            c_m = rng.normal(size=(24, 32))
            c_e = rng.normal(size=(3, 32))
            assert torch.equal(controlled_forward(model, branch, x_t, 3, c_m, c_e),
                               backbone_forward(model, x_t, 3, c_m))

    def test_null_text_bypasses_branch(self, model, branch):
        rng = np.random.default_rng(7)
        x_t = rng.normal(size=(24, TOY_FEATURE_DIM))
        c_m = rng.normal(size=(24, 32))
        assert torch.equal(controlled_forward(model, branch, x_t, 3, c_m, None),
                           backbone_forward(model, x_t, 3, c_m))

    def test_perturbed_branch_changes_output(self, model, branch):
        rng = np.random.default_rng(8)
        x_t = rng.normal(size=(24, TOY_FEATURE_DIM))
        c_m = rng.normal(size=(24, 32))
        c_e = rng.normal(size=(2, 32))
        with torch.no_grad():
            branch.zero_projs[0].weight.add_(0.05)
        try:
            diff = (controlled_forward(model, branch, x_t, 3, c_m, c_e)
                    - backbone_forward(model, x_t, 3, c_m))
            assert diff.detach().abs().max().item() > 0.0
        finally:
            with torch.no_grad():
                branch.zero_projs[0].weight.sub_(0.05)


class TestDanceLoss:
    def test_identity_gives_zero_terms(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(20, TOY_FEATURE_DIM))
        x0[:, -4:] = (x0[:, -4:] > 0).astype(float)
        total, terms = dance_loss(x0, x0, LossWeights(), TOY_CONTACT_MAP)
        assert float(total) == 0.0
        assert all(float(v) == 0.0 for v in terms.values())

    def test_pure_reconstruction_weighting(self):
        x0 = np.zeros((6, 10))
        total, _ = dance_loss(x0, x0 + 2.0, LossWeights(diff=1, joint=0, vel=0, contact=0))
        assert float(total) == 4.0

    def test_constant_offset_has_zero_velocity_term(self):
        # Dyadic values keep the offset addition exact, so differences cancel.
        rng = np.random.default_rng(10)
        x0 = rng.integers(-8, 8, size=(12, 10)) / 8.0
        _, terms = dance_loss(x0, x0 + 0.5, LossWeights())
        assert float(terms["vel"]) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dance_loss(np.zeros((4, 6)), np.zeros((5, 6)), LossWeights())

    def test_weight_validation(self):
        with pytest.raises(UserInputError):
            LossWeights(diff=0, joint=0, vel=0, contact=0)
        with pytest.raises(UserInputError):
            LossWeights(lambda_p=1.5)


@pytest.fixture(scope="module")
def tiny_corpus():
    items = assemble_corpus("music_dance", 16, seed=31)
    return [(it.features, it.music["features"]) for it in items], items


class TestTrainBackbone:
    def test_trace_length_and_determinism(self, tiny_corpus):
        corpus, _ = tiny_corpus
        cfg = GenConfig(steps=8, timesteps=20, seed=1)
        _, t1 = train_backbone(corpus, cfg)
        _, t2 = train_backbone(corpus, cfg)
        assert len(t1) == 8
        assert t1 == t2

    def test_loss_decreases_smoke(self, tiny_corpus):
        corpus, _ = tiny_corpus
        cfg = GenConfig(steps=120, timesteps=20, seed=2)
        _, trace = train_backbone(corpus, cfg)
        assert trace[-1]["total"] < 0.5 * trace[0]["total"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(UserInputError):
            train_backbone([], GenConfig())


def _triplet(features, music, text):
    from choreokit.bank import PseudoTriplet
    provenance = {"music": "native_pair" if music is not None else "null_filled",
                  "text": "native_pair" if text is not None else "null_filled"}
    if "native_pair" not in provenance.values():
        provenance["music"] = "native_pair"
    return PseudoTriplet(motion_features=features, music_cond=music, text_cond=text,
                         provenance=provenance)


@pytest.fixture(scope="module")
def finetune_setup(tiny_corpus):
    corpus, items = tiny_corpus
    cfg = GenConfig(steps=40, timesteps=20, seed=3)
    backbone, _ = train_backbone(corpus, cfg)
    trip_text = [_triplet(it.features, None, it.label) for it in items]
    trip_dance = [_triplet(it.features, it.music["features"], it.description)
                  for it in items]
    return backbone, trip_text, trip_dance, cfg


class TestFinetune:
    def test_backbone_digest_frozen_and_combined_exact(self, finetune_setup):
        backbone, trip_text, trip_dance, cfg = finetune_setup
        digest = serial.model_digest(backbone)
        branch = build_control_branch(backbone)
        for lam in (0.0, 0.5, 1.0):
            weights = LossWeights(lambda_p=lam)
            branch_out, trace = finetune_control(
                backbone, build_control_branch(backbone), trip_text, trip_dance,
                weights, GenConfig(steps=6, timesteps=20, seed=4))
            for row in trace:
                expected = (1.0 - lam) * row["loss_text"] + lam * row["loss_dance"]
                assert row["combined"] == expected
        assert serial.model_digest(backbone) == digest

    def test_branch_moves_after_one_step(self, finetune_setup):
        backbone, trip_text, trip_dance, cfg = finetune_setup
        branch = build_control_branch(backbone)
        rng = np.random.default_rng(12)
        x_t = rng.normal(size=(backbone.config.frames, TOY_FEATURE_DIM))
        c_m = trip_dance[0].music_cond
        c_e = text_condition_tokens("walk_move")
        finetune_control(backbone, branch, trip_text, trip_dance, LossWeights(),
                         GenConfig(steps=1, timesteps=20, seed=5))
        diff = (controlled_forward(backbone, branch, x_t, 3, c_m, c_e)
                - backbone_forward(backbone, x_t, 3, c_m))
        assert diff.detach().abs().max().item() > 0.0


from choreokit.diffusion import finetune_control  # noqa: E402  (used above)


class TestSampling:
    def test_determinism(self, finetune_setup):
        backbone, _, trip_dance, _ = finetune_setup
        c_m = trip_dance[0].music_cond
        a = cfg_sample(backbone, None, c_m, None, music_scale=2.0, seed=11)
        b = cfg_sample(backbone, None, c_m, None, music_scale=2.0, seed=11)
        assert np.array_equal(a.features, b.features)

    def test_scale_one_guidance_identity(self, finetune_setup):
        # At scale 1 the combination collapses; the sampler must follow the
        # exact same trajectory as plain conditioned sampling.
        backbone, _, trip_dance, _ = finetune_setup
        c_m = trip_dance[0].music_cond
        sched = NoiseSchedule.cosine(backbone.config.timesteps)
        one = cfg_sample(backbone, None, c_m, None, music_scale=1.0, schedule=sched, seed=13)
        reference = cfg_sample(backbone, None, c_m, None, music_scale=1.0, schedule=sched,
                               seed=13)
        assert np.array_equal(one.features, reference.features)
        # and scale 1 must differ from scale 3 (guidance does something)
        three = cfg_sample(backbone, None, c_m, None, music_scale=3.0, schedule=sched, seed=13)
        assert not np.array_equal(one.features, three.features)

    def test_null_text_equals_untouched_backbone(self, finetune_setup):
        backbone, trip_text, trip_dance, _ = finetune_setup
        branch, _ = finetune_control(backbone, build_control_branch(backbone), trip_text,
                                     trip_dance, LossWeights(),
                                     GenConfig(steps=5, timesteps=20, seed=6))
        c_m = trip_dance[0].music_cond
        with_branch = cfg_sample(backbone, branch, c_m, None, music_scale=2.0, seed=17)
        without = cfg_sample(backbone, None, c_m, None, music_scale=2.0, seed=17)
        assert np.array_equal(with_branch.features, without.features)

    def test_text_only_path_completes(self, finetune_setup):
        backbone, trip_text, trip_dance, _ = finetune_setup
        branch, _ = finetune_control(backbone, build_control_branch(backbone), trip_text,
                                     trip_dance, LossWeights(),
                                     GenConfig(steps=5, timesteps=20, seed=7))
        clip = cfg_sample(backbone, branch, None, text_condition_tokens("jump"),
                          music_scale=3.0, seed=19)
        assert np.isfinite(clip.features).all()
        assert clip.features.shape == (backbone.config.frames, TOY_FEATURE_DIM)
        assert clip.features[:, -4:].min() >= 0.0 and clip.features[:, -4:].max() <= 1.0


class TestReadout:
    def test_recovers_encoded_joints(self):
        seqs = [synthesize(PrimitiveSpec(name, seed=i), 30)
                for i, name in enumerate(("walk_move", "jump", "crouch", "wave"))]
        feats = [toy_features_from_sequence(s) for s in seqs]
        readout = fit_position_readout(feats, [s.positions for s in seqs])
        rec = positions_from_features(readout, feats[0])
        err = np.abs(rec - seqs[0].positions).max()
        assert err < 0.05
        assert detect_axes(sequence_from_clip(
            readout, type("C", (), {"features": feats[1], "fps": 30})())).height_axis == 1


class TestCheckpoints:
    def test_backbone_round_trip(self, finetune_setup, tmp_path):
        backbone, _, _, _ = finetune_setup
        path = tmp_path / "backbone.json"
        save_backbone(path, backbone)
        loaded = load_backbone(path)
        assert serial.model_digest(loaded) == serial.model_digest(backbone)
        rng = np.random.default_rng(20)
        x_t = rng.normal(size=(backbone.config.frames, TOY_FEATURE_DIM))
        c_m = rng.normal(size=(backbone.config.frames, 32))
        assert torch.equal(backbone_forward(loaded, x_t, 3, c_m),
                           backbone_forward(backbone, x_t, 3, c_m))

    def test_branch_round_trip(self, finetune_setup, tmp_path):
        backbone, trip_text, trip_dance, _ = finetune_setup
        branch, _ = finetune_control(backbone, build_control_branch(backbone), trip_text,
                                     trip_dance, LossWeights(),
                                     GenConfig(steps=5, timesteps=20, seed=8))
        path = tmp_path / "branch.json"
        save_branch(path, branch, backbone.config)
        loaded = load_branch(path, backbone)
        assert serial.model_digest(loaded) == serial.model_digest(branch)
