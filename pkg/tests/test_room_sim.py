import itertools

import numpy as np
import pytest

from acoustics_analysis import SPEED_OF_SOUND, rt_per_band, toa_estimate
from errors import GeometryError
from room_sim import (
    ARRAY_RADIUS, Infeasible, RoomSpec, SimConfig, array_geometry, cardioid_gain, diffuse_tail,
    fractional_delay_kernel, image_sources, make_room, octave_bands_for, random_interior_point, read_room,
    read_srir, sabine_absorption, sabine_rt, simulate_srir, visibility_test, write_room, write_srir,
)


def _lattice(source, dims, max_order):
    """Closed-form shoebox image positions with their reflection counts"""
    per_axis = []
    for s, length in zip(source, dims):
        options = []
        for n in range(-max_order, max_order + 1):
            options.append((2 * n * length + s, abs(2 * n)))
            options.append((2 * n * length - s, abs(2 * n - 1)))
        per_axis.append(options)
    images = set()
    for (x, ox), (y, oy), (z, oz) in itertools.product(*per_axis):
        if ox + oy + oz <= max_order:
            images.add((round(x, 6), round(y, 6), round(z, 6)))
    return images


class TestRoom:

    def test_shoebox_geometry(self):
        room = make_room((5.0, 4.0, 3.0), perturbation=0.0)
        assert room.volume == pytest.approx(60.0)
        assert room.surface_area == pytest.approx(94.0)
        np.testing.assert_allclose(sorted(room.wall_areas), [12, 12, 15, 15, 20, 20])

    def test_perturbed_room_is_valid_and_deterministic(self):
        first = make_room((6.0, 5.0, 3.0), perturbation=0.05, seed=7)
        second = make_room((6.0, 5.0, 3.0), perturbation=0.05, seed=7)
        np.testing.assert_array_equal(first.normals, second.normals)
        np.testing.assert_allclose(np.linalg.norm(first.normals, axis=1), 1.0)
        assert abs(first.volume - 90.0) <= 0.2 * 90.0
        # every corner lies on (or inside) every wall plane
        assert np.all(first.signed_distances(first.vertices) > -1e-9)
        assert not np.allclose(first.normals, make_room((6.0, 5.0, 3.0), perturbation=0.05, seed=8).normals)

    def test_perturbation_limit(self):
        with pytest.raises(GeometryError):
            make_room((5.0, 4.0, 3.0), perturbation=0.06)
        with pytest.raises(GeometryError):
            make_room((5.0, -4.0, 3.0))

    def test_sabine_absorption(self):
        room = make_room((5.0, 4.0, 3.0), perturbation=0.0)
        alpha = sabine_absorption(np.full(6, 0.5), room)
        np.testing.assert_allclose(alpha, 0.161 * 60.0 / (94.0 * 0.5))
        assert alpha[0] == pytest.approx(0.21, abs=0.01)
        np.testing.assert_allclose(sabine_rt(room.with_absorption(alpha)), 0.5)

    def test_sabine_infeasible(self):
        room = make_room((20.0, 20.0, 8.0), perturbation=0.0)
        result = sabine_absorption(np.full(6, 0.05), room)
        assert isinstance(result, Infeasible)
        assert np.all(result.alpha > 1.0)

    def test_absorption_range(self, shoebox):
        with pytest.raises(GeometryError):
            shoebox.with_absorption(np.full(len(shoebox.bands), 1.5))

    def test_interior_point_margin(self, shoebox, rng):
        for _ in range(20):
            assert shoebox.contains(random_interior_point(shoebox, rng, 0.3), 0.3)

    def test_json_round_trip(self, tmp_path):
        room = make_room((6.0, 5.0, 3.0), perturbation=0.03, seed=3, bands=octave_bands_for(8000))
        room = room.with_absorption(sabine_absorption(np.full(len(room.bands), 0.7), room))
        restored = read_room(write_room(tmp_path / 'room.json', room))
        np.testing.assert_allclose(restored.normals, room.normals)
        np.testing.assert_allclose(restored.absorption, room.absorption)
        assert restored.bands == room.bands


class TestArray:

    def test_tetrahedral_geometry(self):
        array = array_geometry([1.0, 2.0, 1.5])
        np.testing.assert_allclose(np.linalg.norm(array.capsule_offsets, axis=1), ARRAY_RADIUS)
        np.testing.assert_allclose(array.capsule_offsets.sum(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(array.positions.mean(axis=0), [1.0, 2.0, 1.5])

    def test_cardioid_gain(self):
        assert cardioid_gain([1, 0, 0], [1, 0, 0]) == 1.0
        assert cardioid_gain([1, 0, 0], [-1, 0, 0]) == 0.0
        assert cardioid_gain([1, 0, 0], [0, 1, 0]) == pytest.approx(0.5)

    def test_cardioid_rejects_non_unit(self):
        with pytest.raises(GeometryError):
            cardioid_gain([2, 0, 0], [1, 0, 0])


class TestImageSources:

    def test_shoebox_lattice_and_visibility(self, shoebox):
        source = np.array([1.3, 2.1, 1.7])
        receiver = np.array([3.6, 1.2, 1.1])
        images = image_sources(shoebox, source, 3)
        found = {tuple(np.round(img.position, 6)) for img in images}
        assert found == _lattice(source, (5.0, 4.0, 3.0), 3)
        assert all(visibility_test(img, receiver, shoebox, source) for img in images)

    def test_first_order_count(self, shoebox):
        images = image_sources(shoebox, [1.0, 1.0, 1.0], 1)
        assert [img.order for img in images].count(0) == 1
        assert [img.order for img in images].count(1) == 6

    def test_band_gains(self, shoebox):
        images = image_sources(shoebox, [1.0, 1.0, 1.0], 2)
        reflect = np.sqrt(1.0 - shoebox.absorption[0])
        for img in images:
            np.testing.assert_allclose(img.band_gains, reflect ** img.order)

    def test_no_consecutive_walls(self, shoebox):
        for img in image_sources(shoebox, [2.0, 1.5, 1.0], 4):
            assert all(a != b for a, b in zip(img.wall_sequence, img.wall_sequence[1:]))

    def test_source_outside(self, shoebox):
        with pytest.raises(GeometryError):
            image_sources(shoebox, [6.0, 1.0, 1.0], 2)

    def test_tilted_wall_hides_a_reflection(self):
        tilt = np.deg2rad(30.0)
        normals = np.array([[1.0, 0.0, 0.0], [-np.cos(tilt), -np.sin(tilt), 0.0], [0.0, 1.0, 0.0],
                            [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        # x1 wall passes through (5, 2) and meets the y1 wall at x = 3.85
        offsets = np.array([0.0, -(5.0 * np.cos(tilt) + 2.0 * np.sin(tilt)), 0.0, -4.0, 0.0, -3.0])
        room = RoomSpec(normals=normals, offsets=offsets, nominal_dims=(5.0, 4.0, 3.0))
        source = np.array([3.5, 3.5, 1.5])
        receiver = np.array([1.0, 3.95, 1.5])
        first_order = {img.wall_sequence: img for img in image_sources(room, source, 1)}
        # the specular point on the tilted wall lies beyond the y1 wall
        assert not visibility_test(first_order[(1,)], receiver, room, source)
        assert visibility_test(first_order[(0,)], receiver, room, source)

    def test_perturbed_room_keeps_direct_path(self):
        room = make_room((6.0, 5.0, 3.0), perturbation=0.05, seed=11)
        source = np.array([1.0, 1.2, 1.1])
        images = image_sources(room, source, 3)
        assert images[0].order == 0
        assert visibility_test(images[0], [3.0, 2.5, 1.5], room, source)
        assert max(img.order for img in images) == 3


class TestRendering:

    def test_integer_delay_kernel(self):
        indices, weights = fractional_delay_kernel(np.array([10.0]))
        peak = np.argmax(weights[0])
        assert indices[0, peak] == 10
        np.testing.assert_allclose(np.delete(weights[0], peak), 0.0, atol=1e-12)
        assert weights[0, peak] == pytest.approx(1.0)

    def test_fractional_kernel_interpolates(self):
        _, weights = fractional_delay_kernel(np.array([10.25]))
        assert weights.sum() == pytest.approx(1.0, abs=0.02)

    def test_output_shape_and_determinism(self, shoebox, desk_sim):
        array = array_geometry([3.0, 2.0, 1.5])
        first = simulate_srir(shoebox, [1.0, 1.0, 1.2], array, desk_sim, seed=5)
        second = simulate_srir(shoebox, [1.0, 1.0, 1.2], array, desk_sim, seed=5)
        assert first.samples.shape == (4, desk_sim.length)
        assert first.samples.dtype == np.float32
        np.testing.assert_array_equal(first.samples, second.samples)
        assert not first.aligned

    def test_source_outside(self, shoebox, desk_sim):
        with pytest.raises(GeometryError):
            simulate_srir(shoebox, [9.0, 1.0, 1.0], array_geometry([3.0, 2.0, 1.5]), desk_sim)

    def test_band_mismatch(self, desk_sim):
        room = make_room((5.0, 4.0, 3.0), perturbation=0.0)
        room = room.with_absorption(np.full(6, 0.3))
        with pytest.raises(GeometryError):
            simulate_srir(room, [1.0, 1.0, 1.0], array_geometry([3.0, 2.0, 1.5]), desk_sim)

    def test_direct_sound_arrival(self, rng):
        config = SimConfig(sample_rate=48000, duration=0.06, max_order=0, tail=False,
                           bands=octave_bands_for(48000))
        room = make_room((5.0, 4.0, 3.0), perturbation=0.0, bands=config.bands)
        room = room.with_absorption(np.full(len(config.bands), 0.3))
        for _ in range(10):
            source = random_interior_point(room, rng, 0.5)
            receiver = random_interior_point(room, rng, 0.5)
            distance = np.linalg.norm(source - receiver)
            if distance < 0.5:
                continue
            srir = simulate_srir(room, source, array_geometry(receiver, radius=1e-4), config)
            expected = distance / SPEED_OF_SOUND * config.sample_rate
            assert abs(toa_estimate(srir.samples, config.sample_rate) * config.sample_rate - expected) <= 1.0

    def test_cardioid_front_capsule_is_loudest(self, shoebox):
        config = SimConfig(sample_rate=8000, duration=0.05, max_order=0, tail=False, bands=shoebox.bands)
        array = array_geometry([2.5, 2.0, 1.5])
        srir = simulate_srir(shoebox, [4.5, 2.0, 1.5], array, config)
        facing = np.argmax(array.look_directions @ np.array([1.0, 0.0, 0.0]))
        assert np.argmax(np.abs(srir.samples).max(axis=1)) == facing

    @pytest.mark.parametrize('rt', [0.3, 0.6, 1.0])
    def test_sabine_consistency(self, rt):
        bands = octave_bands_for(8000)
        config = SimConfig(sample_rate=8000, duration=1.2, max_order=6, tail=True, bands=bands)
        room = make_room((6.0, 5.0, 3.0), perturbation=0.0, bands=bands)
        room = room.with_absorption(sabine_absorption(np.full(len(bands), rt), room))
        srir = simulate_srir(room, [1.5, 1.2, 1.4], array_geometry([4.2, 3.1, 1.6]), config, seed=3)
        measured = rt_per_band(srir.samples, config.sample_rate, (1000,), 'T30')[1000]
        assert measured == pytest.approx(rt, rel=0.25)

    def test_srir_file_round_trip(self, tmp_path, shoebox, desk_sim):
        srir = simulate_srir(shoebox, [1.0, 1.0, 1.2], array_geometry([3.0, 2.0, 1.5]), desk_sim)
        restored = read_srir(write_srir(tmp_path / 'r.wav', srir, {'room_id': 'x'}))
        np.testing.assert_array_equal(restored.samples, srir.samples)
        np.testing.assert_allclose(restored.source, [1.0, 1.0, 1.2])
        assert restored.metadata['room_id'] == 'x'


class TestFreeField:
    """Direct path only, capsules close enough to share one delay"""

    RECEIVER = np.array([10.0, 10.0, 4.0])
    DIRECTION = np.array([1.0, 0.5, 0.2]) / np.linalg.norm([1.0, 0.5, 0.2])

    @pytest.fixture
    def config(self):
        return SimConfig(sample_rate=8000, duration=0.15, max_order=0, tail=False, bands=octave_bands_for(8000))

    @pytest.fixture
    def hall(self, config):
        room = make_room((20.0, 20.0, 8.0), perturbation=0.0, bands=config.bands)
        return room.with_absorption(np.full(len(config.bands), 0.5))

    def _channel_energy(self, hall, config, samples_away):
        # whole-sample delays keep the rendered pulse shape identical
        distance = samples_away * config.speed_of_sound / config.sample_rate
        array = array_geometry(self.RECEIVER, radius=1e-6)
        srir = simulate_srir(hall, self.RECEIVER + distance * self.DIRECTION, array, config)
        return (srir.samples.astype(np.float64) ** 2).sum(axis=1), distance, array

    def test_doubling_distance_loses_six_db(self, hall, config):
        near, _, _ = self._channel_energy(hall, config, 100)
        far, _, _ = self._channel_energy(hall, config, 200)
        assert 10.0 * np.log10(near.sum() / far.sum()) == pytest.approx(6.02, abs=0.1)

    def test_amplitude_follows_gain_over_distance(self, hall, config):
        ratios = []
        for samples_away in (100, 150, 200):
            energy, distance, array = self._channel_energy(hall, config, samples_away)
            for look, e in zip(array.look_directions, energy):
                gain = cardioid_gain(look, self.DIRECTION)
                if gain > 0.05:
                    ratios.append(np.sqrt(e) * distance / gain)
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-3)

    def test_energy_does_not_grow_with_absorption(self, shoebox):
        config = SimConfig(sample_rate=8000, duration=0.25, max_order=3, tail=False, bands=shoebox.bands)
        energies = []
        for alpha in (0.1, 0.3, 0.6, 0.9):
            room = shoebox.with_absorption(np.full(len(shoebox.bands), alpha))
            srir = simulate_srir(room, [1.0, 1.0, 1.2], array_geometry([3.0, 2.0, 1.5]), config)
            energies.append(float((srir.samples.astype(np.float64) ** 2).sum()))
        assert np.all(np.diff(energies) <= 0.0)


class TestDiffuseTail:

    CROSSOVER = 200
    LENGTH = 2400

    @pytest.fixture
    def reference(self, shoebox, rng):
        reference = np.zeros((len(shoebox.bands), 4, self.LENGTH))
        reference[..., :self.CROSSOVER] = rng.standard_normal((len(shoebox.bands), 4, self.CROSSOVER))
        return reference

    def _tail(self, shoebox, reference, rt, seed=4):
        # a single active band; NaN bands contribute nothing
        rts = np.full(len(shoebox.bands), np.nan)
        rts[2] = rt
        return diffuse_tail(shoebox, rts, self.CROSSOVER, seed, reference, 8000)

    def test_envelope_reaches_minus_sixty_db_at_rt(self, shoebox, reference):
        decaying = self._tail(shoebox, reference, 0.2)
        flat = self._tail(shoebox, reference, 1e9)
        at_rt = self.CROSSOVER + int(0.2 * 8000)
        level = 20.0 * np.log10(np.abs(decaying[:, at_rt] / flat[:, at_rt]))
        np.testing.assert_allclose(level, -60.0, atol=0.05)
        assert np.all(decaying[:, :self.CROSSOVER] == 0.0)

    def test_silent_reference_gives_silent_tail(self, shoebox):
        tail = self._tail(shoebox, np.zeros((len(shoebox.bands), 4, self.LENGTH)), 0.3)
        assert np.all(tail == 0.0)

    def test_seeded(self, shoebox, reference):
        first = self._tail(shoebox, reference, 0.3)
        np.testing.assert_array_equal(first, self._tail(shoebox, reference, 0.3))
        assert not np.allclose(first, self._tail(shoebox, reference, 0.3, seed=5))

    def test_crossover_outside_response(self, shoebox, reference):
        with pytest.raises(GeometryError):
            diffuse_tail(shoebox, np.full(len(shoebox.bands), 0.3), self.LENGTH, 0, reference, 8000)
