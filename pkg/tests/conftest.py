import pytest

from peloc import synth


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Three short synthetic sessions with audio and transcripts on disk."""
    root = tmp_path_factory.mktemp("mini_corpus")
    cfg = synth.SynthConfig(
        n_sessions=3,
        duration_mean_s=200.0, duration_std_s=20.0,
        duration_min_s=170.0, duration_max_s=260.0,
        phase_means_min=(0.5, 1.8, 0.5),
        seed=123)
    sessions, stats = synth.generate_corpus(cfg, root)
    return {"root": root, "cfg": cfg, "sessions": sessions, "stats": stats}
