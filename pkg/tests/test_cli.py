import json

import numpy as np
import pandas as pd
import pytest

from cli import LOG_FILE, build_parser, dispatch
from room_sim import SimConfig, array_geometry, read_srir, simulate_srir, write_srir


def _simulate_args(tmp_path, *extra):
    return ['--log-dir', str(tmp_path / 'logs'), 'simulate', '--dims', '5,4,3', '--source', '1,1,1.2',
            '--receiver', '3,2,1.5', '--max-order', '2', '--out', str(tmp_path / 'out.wav')] + list(extra)


class TestParser:

    def test_missing_subcommand(self):
        assert dispatch([]) == 2

    def test_unknown_subcommand(self):
        assert dispatch(['transmogrify']) == 2

    def test_malformed_point(self, tmp_path):
        assert dispatch(['simulate', '--source', '1,2', '--receiver', '1,1,1', '--out', str(tmp_path / 'x.wav')]) == 2

    def test_global_flags(self):
        args = build_parser().parse_args(['--scale', 'full', '--seed', '7', 'report', '--rows', 'r.csv',
                                          '--out', 'plots'])
        assert (args.scale, args.seed, args.command) == ('full', 7, 'report')


class TestSimulate:

    def test_writes_srir_sidecar_and_echo(self, tmp_path):
        assert dispatch(_simulate_args(tmp_path, '--rt', '0.4')) == 0
        srir = read_srir(tmp_path / 'out.wav')
        assert srir.samples.shape == (4, 2000)
        assert srir.sample_rate == 8000
        np.testing.assert_allclose(srir.source, [1.0, 1.0, 1.2])
        echo = json.loads((tmp_path / 'out.run.json').read_text())
        assert echo['command'] == 'simulate'
        assert echo['preset']['sim']['max_order'] == 2
        assert (tmp_path / 'logs' / LOG_FILE).exists()

    def test_missing_reverberation_time(self, tmp_path, capsys):
        assert dispatch(_simulate_args(tmp_path)) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith('error: ConfigurationError:')

    def test_infeasible_reverberation_time(self, tmp_path, capsys):
        assert dispatch(_simulate_args(tmp_path, '--rt', '0.06')) == 1
        assert 'error: GeometryError:' in capsys.readouterr().err

    def test_source_outside_room(self, tmp_path, capsys):
        args = _simulate_args(tmp_path, '--rt', '0.4')
        args[args.index('1,1,1.2')] = '9,1,1'
        assert dispatch(args) == 1
        assert 'GeometryError' in capsys.readouterr().err


class TestEvaluate:

    @pytest.fixture
    def truth_dir(self, tmp_path, shoebox):
        config = SimConfig(sample_rate=8000, duration=0.25, max_order=4, bands=shoebox.bands)
        directory = tmp_path / 'truth'
        for j, receiver in enumerate(([3.0, 2.0, 1.5], [3.5, 2.5, 1.5])):
            srir = simulate_srir(shoebox, [1.0, 1.0, 1.2], array_geometry(receiver), config, seed=j)
            write_srir(directory / f'room_p{j:02d}.wav', srir, {'room_id': 'room', 'position_id': j})
        return directory

    def test_identical_responses(self, tmp_path, truth_dir):
        out = tmp_path / 'report.csv'
        code = dispatch(['evaluate', '--pred', str(truth_dir), '--truth', str(truth_dir), '--out', str(out),
                         '--label', 'oracle'])
        assert code == 0
        report = pd.read_csv(out)
        assert report['label'][0] == 'oracle'
        assert report['count'][0] == 2
        assert report['rt_rmse'][0] == pytest.approx(0.0)
        assert report['drr_rmse'][0] == pytest.approx(0.0)
        rows = pd.read_csv(tmp_path / 'report_rows.csv')
        assert sorted(rows['kind'].unique()) == ['pred', 'true']

        plots = tmp_path / 'plots'
        assert dispatch(['report', '--rows', str(tmp_path / 'report_rows.csv'), '--out', str(plots)]) == 0
        assert (plots / 'rt_scatter.txt').exists()
        assert (plots / 'doa_arrows.txt').exists()

    def test_missing_prediction(self, tmp_path, truth_dir, capsys):
        pred = tmp_path / 'pred'
        pred.mkdir()
        code = dispatch(['evaluate', '--pred', str(pred), '--truth', str(truth_dir), '--out',
                         str(tmp_path / 'r.csv')])
        assert code == 1
        assert 'error: DatasetError:' in capsys.readouterr().err

    def test_report_needs_rows_file(self, tmp_path, capsys):
        rows = tmp_path / 'plain.csv'
        rows.write_text('a,b\n1,2\n')
        assert dispatch(['report', '--rows', str(rows), '--out', str(tmp_path / 'plots')]) == 1
        assert 'DatasetError' in capsys.readouterr().err
