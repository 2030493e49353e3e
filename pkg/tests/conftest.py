import pytest

from choreokit.align import AlignConfig
from choreokit.diffusion import GenConfig
from choreokit.pipeline import KpsParams, PipelineConfig, SynthParams, run_pipeline


def tiny_pipeline_config(out_dir, seed=7) -> PipelineConfig:
    """A minutes-scale configuration exercising every stage."""
    return PipelineConfig(
        seed=seed,
        out_dir=str(out_dir),
        synth=SynthParams(n_music_dance=16, n_text_motion=16),
        align=AlignConfig(steps=100, queue_size=32, batch_size=32),
        gen=GenConfig(steps=80, timesteps=20, batch_size=4),
        finetune_steps=30,
        kps=KpsParams(replicates=1, groups=1, music_scale=2.0, sample_timesteps=20),
    )


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One completed pipeline run shared across tests."""
    out_dir = tmp_path_factory.mktemp("pipeline") / "run"
    config = tiny_pipeline_config(out_dir)
    produced = run_pipeline(config)
    return config, produced
