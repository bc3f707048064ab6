import json

import numpy as np
import pandas as pd
import pytest

from audio_io import read_wav, write_wav
from dataset_pipeline import (
    MANIFEST_COLUMNS, DatasetConfig, RtProfile, build_dataset, draw_room, draw_rt_profile, line_positions,
    load_corpus, load_evaluation, load_manifest, load_room, load_rt_profiles, load_scene_pairs,
    make_synthetic_corpus, mix_sources, normalize_align, render_scene_pair, synthetic_rt_profile,
)
from errors import AnalysisError, ConfigurationError, DatasetError, GeometryError
from room_sim import SRIR, make_room, octave_bands_for, sabine_rt
from srir_diffusion import Variant

BANDS_8K = octave_bands_for(8000)


def _impulse_srir(position=50, amplitude=2.0, fs=8000, length=200):
    samples = np.zeros((4, length))
    samples[:, position] = amplitude
    samples[:, position + 20] = 0.3 * amplitude
    return SRIR(samples=samples, sample_rate=fs, source=np.array([1.0, 1.0, 1.0]),
                receiver=np.array([2.0, 2.0, 1.0]))


class TestRtProfiles:

    def test_load_profiles(self, tmp_path):
        path = tmp_path / 'rt.csv'
        path.write_text('name,T60_125Hz,T60_250Hz,T60_500Hz,T60_1000Hz,T60_2000Hz,T60_4000Hz\n'
                        'hall,1.2,1.1,1.0,0.9,0.8,0.7\n'
                        'office,0.5,0.5,0.4,0.4,0.4,0.3\n')
        profiles = load_rt_profiles(path)
        assert len(profiles) == 2
        np.testing.assert_allclose(profiles[1].values, [0.5, 0.5, 0.4, 0.4, 0.4, 0.3])
        assert profiles[0].provenance == 'rt.csv:2'

    def test_subset_of_bands(self, tmp_path):
        path = tmp_path / 'rt.csv'
        path.write_text('rt_125,rt_250,rt_500,rt_1000,rt_2000,rt_4000\n0.6,0.6,0.5,0.5,0.4,0.4\n')
        profile = load_rt_profiles(path, BANDS_8K)[0]
        assert profile.bands == tuple(BANDS_8K)
        assert profile.values.size == len(BANDS_8K)

    def test_errors_name_the_line(self, tmp_path):
        path = tmp_path / 'rt.csv'
        path.write_text('125,250,500,1000,2000,4000\n0.6,0.6,0.5,0.5,0.4,0.4\n0.6,abc,0.5,0.5,0.4,0.4\n')
        with pytest.raises(DatasetError, match=r'rt\.csv:3'):
            load_rt_profiles(path)
        path.write_text('125,250,500,1000,2000,4000\n0.6,0.6,0.5,0.04,0.4,0.4\n')
        with pytest.raises(DatasetError, match=r'rt\.csv:2'):
            load_rt_profiles(path)

    def test_missing_band_and_file(self, tmp_path):
        path = tmp_path / 'rt.csv'
        path.write_text('125,250\n0.5,0.5\n')
        with pytest.raises(DatasetError, match='lacks'):
            load_rt_profiles(path)
        with pytest.raises(DatasetError):
            load_rt_profiles(tmp_path / 'absent.csv')

    def test_synthetic_family(self):
        np.testing.assert_allclose(synthetic_rt_profile(0.8, 0.0).values, 0.8)
        tilted = synthetic_rt_profile(1.0, -0.35)
        assert tilted.values[-1] == pytest.approx(0.616, abs=1e-3)
        assert tilted.values[3] == pytest.approx(1.0)
        assert np.all(np.diff(tilted.values) < 0)

    def test_synthetic_draw_range(self, rng):
        for _ in range(20):
            profile = draw_rt_profile(None, rng)
            assert 0.2 <= profile.values[3] <= 1.5
            assert profile.values[0] >= profile.values[-1]

    def test_profile_validation(self):
        with pytest.raises(DatasetError):
            RtProfile(values=[0.5, 0.5], bands=(125, 250, 500))
        with pytest.raises(DatasetError):
            draw_rt_profile([], np.random.default_rng(0))


class TestRooms:

    def test_feasible_room(self, rng):
        profile = synthetic_rt_profile(0.6, -0.2, BANDS_8K)
        room, alpha = draw_room(profile, rng)
        assert alpha.shape == (len(BANDS_8K),)
        assert np.all((alpha > 0) & (alpha <= 1))
        np.testing.assert_allclose(sabine_rt(room), profile.values, rtol=1e-9)

    def test_infeasible_room(self, rng):
        profile = synthetic_rt_profile(0.06, 0.0)
        with pytest.raises(DatasetError, match='No feasible room'):
            draw_room(profile, rng, max_tries=5, xy_range=(15.0, 20.0), z_range=(6.0, 8.0))

    def test_max_tries(self, rng):
        with pytest.raises(ConfigurationError):
            draw_room(synthetic_rt_profile(0.5, 0.0), rng, max_tries=0)


class TestCorpus:

    def test_synthetic_corpus(self):
        first = make_synthetic_corpus(4, 8000, 0.5, seed=2)
        second = make_synthetic_corpus(4, 8000, 0.5, seed=2)
        assert len(first) == 4
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
            assert a.size == 4000
            assert np.max(np.abs(a)) == pytest.approx(1.0)

    def test_load_corpus(self, tmp_path, rng):
        for i in range(3):
            write_wav(tmp_path / f'sig{i}.wav', rng.standard_normal((2, 4000)) * 0.1, 8000)
        write_wav(tmp_path / 'short.wav', rng.standard_normal(100) * 0.1, 8000)
        signals = load_corpus(tmp_path, 8000, 0.5)
        assert len(signals) == 3
        assert all(s.ndim == 1 for s in signals)

    def test_too_few_signals(self, tmp_path, rng):
        write_wav(tmp_path / 'one.wav', rng.standard_normal(4000) * 0.1, 8000)
        with pytest.raises(DatasetError, match='need'):
            load_corpus(tmp_path, 8000, 0.5)


class TestScenes:

    def test_mix_is_linear(self, rng):
        srirs = [SRIR(samples=rng.standard_normal((4, 30)), sample_rate=8000, source=np.zeros(3),
                      receiver=np.ones(3)) for _ in range(2)]
        signals = [rng.standard_normal(500) for _ in range(2)]
        mix = mix_sources(srirs, signals, 400)
        assert mix.shape == (4, 400)
        parts = mix_sources(srirs[:1], signals[:1], 400) + mix_sources(srirs[1:], signals[1:], 400)
        np.testing.assert_allclose(mix, parts)
        np.testing.assert_allclose(mix_sources(srirs, [2.0 * s for s in signals], 400), 2.0 * mix)

    def test_mix_count_mismatch(self, rng):
        with pytest.raises(DatasetError):
            mix_sources([_impulse_srir()], [], 100)

    def test_scene_pair(self, shoebox, desk_sim, rng):
        config = DatasetConfig(scene_duration=0.5, max_sources=2)
        corpus = make_synthetic_corpus(4, 8000, 0.5)
        pair = render_scene_pair(shoebox, corpus, rng, desk_sim, config, 'r1')
        assert pair.room_id == 'r1'
        assert not np.allclose(pair.scene_a.receiver, pair.scene_b.receiver)
        for scene in (pair.scene_a, pair.scene_b):
            assert scene.audio.shape == (4, 4000)
            assert np.max(np.abs(scene.audio)) == pytest.approx(0.9)
            assert 1 <= scene.source_count <= 2
            assert len(scene.srirs) == scene.source_count
            assert len(set(scene.signal_ids)) == scene.source_count
            distances = np.linalg.norm(scene.sources - scene.receiver, axis=1)
            assert np.all(distances >= 0.5)

    def test_scene_pair_needs_corpus(self, shoebox, desk_sim, rng):
        config = DatasetConfig(scene_duration=0.5)
        with pytest.raises(DatasetError):
            render_scene_pair(shoebox, make_synthetic_corpus(2, 8000, 0.5), rng, desk_sim, config)
        with pytest.raises(DatasetError, match='shorter'):
            render_scene_pair(shoebox, make_synthetic_corpus(4, 8000, 0.2), rng, desk_sim, config)


class TestNormalizeAlign:

    def test_peak_at_start(self):
        prepared = normalize_align(_impulse_srir())
        assert np.max(np.abs(prepared.samples)) == pytest.approx(1.0)
        assert np.argmax(prepared.samples[0]) == 0
        assert prepared.aligned
        assert prepared.toa_seconds == pytest.approx(50 / 8000)
        assert prepared.length == 200

    def test_idempotent(self):
        once = normalize_align(_impulse_srir())
        twice = normalize_align(once)
        np.testing.assert_array_equal(once.samples, twice.samples)
        assert twice.toa_seconds == pytest.approx(once.toa_seconds)

    def test_with_toa_keeps_delay(self):
        prepared = normalize_align(_impulse_srir(), Variant.WITH_TOA)
        assert np.argmax(prepared.samples[0]) == 50
        assert not prepared.aligned
        assert np.max(np.abs(prepared.samples)) == pytest.approx(1.0)

    def test_silent(self):
        with pytest.raises(AnalysisError):
            normalize_align(_impulse_srir(amplitude=0.0))


class TestEvaluationLine:

    def test_geometry(self):
        room = make_room((10.0, 8.0, 3.0), perturbation=0.0)
        source = np.array([5.0, 4.0, 1.5])
        positions = line_positions(source, room)
        assert positions.shape == (15, 3)
        distances = np.linalg.norm(positions - source, axis=1)
        assert distances[7] == pytest.approx(1.0)
        assert distances.min() == pytest.approx(1.0)
        assert distances[0] == pytest.approx(np.sqrt(10.0))
        np.testing.assert_allclose(distances, distances[::-1])
        np.testing.assert_allclose(positions[:, 2], 1.5)
        np.testing.assert_allclose(np.diff(positions, axis=0), np.diff(positions, axis=0)[:1].repeat(14, 0))

    def test_clipped_span(self):
        room = make_room((4.5, 4.0, 3.0), perturbation=0.0)
        positions = line_positions([2.25, 2.0, 1.5], room)
        span = np.linalg.norm(positions[-1] - positions[0])
        assert 3.0 <= span < 6.0
        assert all(room.contains(p, 0.299) for p in positions)

    def test_room_too_small(self):
        room = make_room((3.0, 3.0, 3.0), perturbation=0.0)
        with pytest.raises(GeometryError):
            line_positions([1.5, 1.5, 1.5], room)

    def test_position_count(self):
        with pytest.raises(ConfigurationError):
            line_positions([5.0, 4.0, 1.5], make_room((10.0, 8.0, 3.0), perturbation=0.0), count=1)


@pytest.mark.slow
class TestBuildDataset:

    @pytest.fixture
    def settings(self, desk_sim):
        config = DatasetConfig(train_rooms=2, val_rooms=1, test_rooms=1, scene_duration=0.5, max_sources=2,
                               xy_range=(6.0, 8.0), z_range=(2.5, 3.0), line_count=5, corpus_signals=4)
        return config, desk_sim

    def test_layout_and_readers(self, tmp_path, settings):
        config, sim = settings
        manifest_path = build_dataset(tmp_path / 'data', config, sim, seed=5, scale='desk')
        frame = load_manifest(manifest_path)
        assert list(frame.columns) == MANIFEST_COLUMNS
        assert frame['split'].value_counts().to_dict() == {'train': 2, 'val': 1, 'test': 1}
        assert frame['room_id'].tolist()[0] == 'train-00000'

        pairs = load_scene_pairs(manifest_path, 'train')
        assert [room_id for room_id, _, _ in pairs] == ['train-00000', 'train-00001']
        assert pairs[0][1].shape == (4, 4000)

        evaluation = load_evaluation(tmp_path / 'data')
        assert len(evaluation) == 5
        assert evaluation['position_id'].tolist() == list(range(5))
        assert len(evaluation['source'][0]) == 3
        assert (tmp_path / 'data' / evaluation['srir_file'][0]).exists()

        room = load_room(manifest_path, 'test-00000')
        assert room.bands == tuple(sim.bands)
        metadata = json.loads((tmp_path / 'data' / 'dataset.json').read_text())
        assert metadata['scale'] == 'desk'
        assert metadata['counts'] == {'train': 2, 'val': 1, 'test': 1}

    def test_deterministic(self, tmp_path, settings):
        config, sim = settings
        first = build_dataset(tmp_path / 'one', config, sim, seed=11)
        second = build_dataset(tmp_path / 'two', config, sim, seed=11)
        pd.testing.assert_frame_equal(pd.read_csv(first), pd.read_csv(second))
        a, _ = read_wav(tmp_path / 'one' / 'scenes' / 'val-00000_b.wav')
        b, _ = read_wav(tmp_path / 'two' / 'scenes' / 'val-00000_b.wav')
        np.testing.assert_array_equal(a, b)

    def test_missing_file(self, tmp_path, settings):
        config, sim = settings
        manifest_path = build_dataset(tmp_path / 'data', config, sim, seed=2)
        (tmp_path / 'data' / 'scenes' / 'train-00001_a.wav').unlink()
        with pytest.raises(DatasetError, match='missing'):
            load_manifest(manifest_path)
