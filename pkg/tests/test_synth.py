import itertools

import numpy as np
import pytest

from evoked.annotations import build_dataset
from evoked.evaluation import pearson
from evoked.synth import SynthConfig, corpus_digest, synth_generate


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(seed=11, segments_per_movie=6, viewers=2, feature_dim=4)
    synth_generate(cfg, tmp_path / "a")
    synth_generate(cfg, tmp_path / "b")
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")
    synth_generate(SynthConfig(seed=12, segments_per_movie=6, viewers=2, feature_dim=4), tmp_path / "c")
    assert corpus_digest(tmp_path / "a") != corpus_digest(tmp_path / "c")


def test_full_correlation_gives_identical_labels(tmp_path):
    cfg = SynthConfig(seed=2, movies=3, segments_per_movie=15, viewers=4, correlation=1.0, noise_scale=0.0,
                      bias_scale=0.0, feature_dim=4)
    manifest, _ = synth_generate(cfg, tmp_path)
    for s in build_dataset(manifest):
        assert len(set(s.per_viewer_label.tolist())) == 1


def test_zero_correlation_gives_unrelated_viewers(tmp_path):
    cfg = SynthConfig(seed=5, movies=1, segments_per_movie=2000, viewers=4, correlation=0.0, feature_dim=4,
                      vocab_size=20)
    manifest, _ = synth_generate(cfg, tmp_path)
    samples = build_dataset(manifest)
    means = np.array([s.per_viewer_mean for s in samples])
    rs = [abs(pearson(means[:, i], means[:, j])) for i, j in itertools.combinations(range(4), 2)]
    assert np.mean(rs) < 0.1


def test_layout_and_ids(tmp_path):
    manifest, truth = synth_generate(SynthConfig(seed=0, segments_per_movie=5, viewers=2, feature_dim=4), tmp_path)
    samples = build_dataset(manifest)
    assert len(samples) == 7 * 5
    assert sorted({s.movie_id for s in samples}) == sorted(["BMI", "CHI", "CRA", "DEP", "FNE", "GLA", "LOR"])
    assert samples[0].visual.shape == (4,)
    assert len(truth["latent"]["BMI"]) == 5
    assert SynthConfig(movies=9).movie_ids()[-1] == "M009"


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(correlation=1.5)
    with pytest.raises(ValueError):
        SynthConfig(viewers=0)
