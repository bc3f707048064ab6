#!/usr/bin/env python3
"""
Command line entry point: one subcommand per pipeline stage.

    simulate         room + positions -> 4-channel SRIR WAV and sidecar
    build-dataset    paired scenes, SRIRs, manifest and evaluation line
    train-encoder    contrastive room encoder checkpoint
    train-generator  conditional diffusion generator checkpoint
    infer            scene + positions -> generated SRIR(s)
    evaluate         acoustic parameter report of predicted vs. true SRIRs
    report           plot-data text files from an evaluation
"""

import os
import sys
import logging
import argparse
from dataclasses import asdict, replace
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from acoustics_analysis import RT_METHODS, analyze_srir, geometric_doa, metrics_report, pair_rows, write_plot_data
from audio_io import read_csv, read_json, read_wav, sidecar_path, write_csv, write_json
from config import preset, rng_stream, scale_config
from errors import ConfigurationError, DatasetError, GeometryError, SRIRWorkbenchError
from room_sim import Infeasible, array_geometry, make_room, read_room, read_srir, sabine_absorption, simulate_srir, \
    write_srir

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
LOG_FILE = 'srir_workbench.log'
VARIANTS = ('proposed', 'concat-all', 'with-toa')


def configure_logging(log_dir: Optional[str] = None, level: str = 'INFO'):
    """Console logging, plus a rotating file when a log directory is configured"""
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT, force=True)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, LOG_FILE),
            maxBytes=10240000,  # 10MB
            backupCount=10
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.INFO)
        logging.getLogger().addHandler(file_handler)


def _point(text: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma-separated point")
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"'{text}' needs exactly three coordinates")
    return np.array(values)


def _echo_path(output: Path) -> Path:
    return output / 'run.json' if output.suffix == '' else output.with_name(f'{output.stem}.run.json')


def echo_config(output, args: argparse.Namespace, settings: Dict) -> Path:
    """Resolved flags and presets next to the primary output"""
    flags = {k: v for k, v in vars(args).items() if k != 'handler'}
    resolved = {k: asdict(v) if hasattr(v, '__dataclass_fields__') else v for k, v in settings.items()}
    return write_json(_echo_path(Path(output)), {'command': args.command, 'flags': flags, 'preset': resolved})


# Subcommands -------------------------------------------------------------------------------

def cmd_simulate(args, settings) -> Path:
    sim = settings['sim']
    if args.max_order is not None:
        sim = replace(sim, max_order=args.max_order)
    if args.no_tail:
        sim = replace(sim, tail=False)
    sim = replace(sim, seed=args.seed)
    settings['sim'] = sim

    if args.room:
        room = read_room(args.room)
        if args.rt is not None:
            room = room.with_absorption(_flat_absorption(room, args.rt, len(room.bands)))
    else:
        if args.dims is None or args.rt is None:
            raise ConfigurationError("simulate needs --room, or --dims together with --rt")
        room = make_room(args.dims, sim.perturbation, args.seed, sim.bands)
        room = room.with_absorption(_flat_absorption(room, args.rt, len(sim.bands)))
    if room.absorption is None:
        raise ConfigurationError(f"Room {args.room} has no absorption; pass --rt")

    array = array_geometry(args.receiver, sim.array_radius)
    srir = simulate_srir(room, args.source, array, sim)
    out = write_srir(args.out, srir)
    logger.info(f"SRIR written to {out}")
    return out


def _flat_absorption(room, rt: float, bands: int) -> np.ndarray:
    alpha = sabine_absorption(np.full(bands, rt), room)
    if isinstance(alpha, Infeasible):
        raise GeometryError(f"RT {rt} s is infeasible for this room: {alpha.reason}")
    return alpha


def cmd_build_dataset(args, settings) -> Path:
    from dataset_pipeline import build_dataset

    dataset = settings['dataset']
    overrides = {k: getattr(args, k) for k in ('train_rooms', 'val_rooms', 'test_rooms')
                 if getattr(args, k) is not None}
    dataset = replace(dataset, **overrides)
    settings['dataset'] = dataset
    build_dataset(args.out, dataset, settings['sim'], args.seed, corpus_dir=args.corpus,
                  profile_file=args.profiles, test_profile_file=args.test_profiles, scale=settings['scale'])
    return Path(args.out)


def cmd_train_encoder(args, settings) -> Path:
    from room_encoder import train_encoder

    encoder = settings['encoder']
    if args.epochs is not None:
        encoder = replace(encoder, epochs=args.epochs)
    settings['encoder'] = encoder
    train_encoder(args.manifest, encoder, settings['features'], args.seed, args.out)
    return Path(args.out)


def cmd_train_generator(args, settings) -> Path:
    from srir_diffusion import train_generator

    diffusion = replace(settings['diffusion'], variant=args.variant)
    if args.epochs is not None:
        diffusion = replace(diffusion, epochs=args.epochs)
    settings['diffusion'] = diffusion
    train_generator(args.manifest, args.encoder, diffusion, args.seed, args.out)
    return Path(args.out)


def _load_models(args):
    from room_encoder import load_encoder
    from srir_diffusion import load_generator

    model, config, metadata = load_generator(args.model)
    if args.variant and args.variant != config.variant:
        raise ConfigurationError(f"Generator {args.model} was trained as '{config.variant}', not '{args.variant}'")
    encoder, feature_config, stats = load_encoder(args.encoder)
    expected = metadata.get('norm_stats_digest')
    if expected and expected != stats.digest:
        logger.warning(f"Encoder {args.encoder} normalization differs from the one the generator was trained with")
    return model, config, encoder, feature_config, stats


def cmd_infer(args, settings) -> Path:
    from room_encoder import embed_scene
    from srir_diffusion import conditioning_vector, sample_srir

    model, config, encoder, feature_config, stats = _load_models(args)
    settings['diffusion'] = config
    settings['features'] = feature_config

    if args.dataset:
        return _infer_evaluation_line(args, model, config, encoder, feature_config, stats)
    if args.scene is None or args.source is None or args.receiver is None or args.out is None:
        raise ConfigurationError("infer needs --scene, --source, --receiver and --out (or --dataset and --out)")
    scene, _ = read_wav(args.scene, feature_config.sample_rate)
    h = embed_scene(scene, encoder, feature_config, stats)
    v = conditioning_vector(args.source, args.receiver)
    srir = sample_srir(h, v, model, config, args.seed, args.source, args.receiver)
    out = write_srir(args.out, srir, {'scene': str(args.scene)})
    logger.info(f"Generated SRIR written to {out}")
    return out


def _infer_evaluation_line(args, model, config, encoder, feature_config, stats) -> Path:
    """One generated SRIR per evaluation position, conditioned on the room's first scene"""
    from dataset_pipeline import load_evaluation
    from room_encoder import embed_scene
    from srir_diffusion import conditioning_vector, sample_srir

    dataset = Path(args.dataset)
    out_dir = Path(args.out)
    manifest = read_csv(dataset / 'manifest.csv').set_index('room_id')
    evaluation = load_evaluation(dataset)
    if evaluation.empty:
        raise DatasetError(f"{dataset} has no evaluation positions")
    embeddings = {}
    for _, row in evaluation.iterrows():
        room_id = row['room_id']
        if room_id not in embeddings:
            scene, _ = read_wav(dataset / manifest.loc[room_id, 'scene_a'], feature_config.sample_rate)
            embeddings[room_id] = embed_scene(scene, encoder, feature_config, stats)
        position = int(row['position_id'])
        seed = int(rng_stream(args.seed, 'infer', room_id, position).integers(2 ** 31))
        v = conditioning_vector(row['source'], row['receiver'])
        srir = sample_srir(embeddings[room_id], v, model, config, seed, row['source'], row['receiver'])
        write_srir(out_dir / Path(row['srir_file']).name, srir, {'room_id': room_id, 'position_id': position})
    logger.info(f"Generated {len(evaluation)} SRIRs into {out_dir}")
    return out_dir


def _identify(path: Path, sidecar: Dict):
    room_id = sidecar.get('room_id')
    position_id = sidecar.get('position_id')
    if room_id is None or position_id is None:
        stem, _, pos = path.stem.rpartition('_p')
        room_id = room_id or stem or path.stem
        position_id = int(pos) if pos.isdigit() else 0
    return str(room_id), int(position_id)


def _analyze_dir(directory: Path, method: str, names: Sequence[str]) -> pd.DataFrame:
    rows = []
    for name in names:
        srir = read_srir(directory / name)
        room_id, position_id = _identify(directory / name, read_json(sidecar_path(directory / name)))
        row = analyze_srir(srir.samples, srir.sample_rate, array_geometry(np.zeros(3)), room_id, position_id, method)
        row.update({'file': name, 'source': srir.source.tolist(), 'receiver': srir.receiver.tolist()})
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_evaluate(args, settings) -> Path:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    names = sorted(p.name for p in truth_dir.glob('*.wav'))
    if not names:
        raise DatasetError(f"No WAV files in {truth_dir}")
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise DatasetError(f"{len(missing)} prediction(s) missing in {pred_dir}, e.g. {missing[:3]}")
    truth = _analyze_dir(truth_dir, args.method, names)
    predicted = _analyze_dir(pred_dir, args.method, names)

    doa_truth = None
    pairs = pair_rows(predicted, truth)
    positions = [(np.asarray(s, float), np.asarray(r, float))
                 for s, r in zip(pairs['source_true'], pairs['receiver_true'])]
    if args.doa_reference == 'geometric' and all(np.all(np.isfinite(s)) and np.all(np.isfinite(r))
                                                 for s, r in positions):
        doa_truth = np.array([geometric_doa(s, r) for s, r in positions])

    report = metrics_report(predicted, truth, args.label, doa_truth)
    out = write_csv(args.out, report)
    rows = pd.concat([predicted.assign(kind='pred'), truth.assign(kind='true')], ignore_index=True)
    rows = rows.drop(columns=['source', 'receiver'])
    write_csv(Path(args.out).with_name(f'{Path(args.out).stem}_rows.csv'), rows)
    logger.info(f"Evaluation of {len(names)} responses written to {out}")
    return out


def cmd_report(args, settings) -> Path:
    rows = read_csv(args.rows)
    if 'kind' not in rows:
        raise DatasetError(f"{args.rows} is not an evaluation rows file (no 'kind' column)")
    predicted = rows[rows['kind'] == 'pred'].drop(columns=['kind'])
    truth = rows[rows['kind'] == 'true'].drop(columns=['kind'])
    write_plot_data(args.out, predicted, truth)
    return Path(args.out)


# Parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    defaults = scale_config()
    parser = argparse.ArgumentParser(prog='srir-workbench', description='Spatial room impulse response workbench')
    parser.add_argument('--scale', choices=['desk', 'full'], default=None,
                        help='size preset (default: $SRIR_SCALE or desk)')
    parser.add_argument('--seed', type=int, default=defaults.SEED, help='global random seed')
    parser.add_argument('--log-dir', default=defaults.LOG_DIR, help='directory for the rotating log file')
    parser.add_argument('--log-level', default=defaults.LOG_LEVEL, help='console log level')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    p = sub.add_parser('simulate', help='simulate one SRIR')
    p.add_argument('--room', help='room JSON (as written by build-dataset)')
    p.add_argument('--dims', type=_point, help='nominal room dimensions x,y,z (with --rt)')
    p.add_argument('--rt', type=float, help='flat reverberation time used to assign absorption')
    p.add_argument('--source', type=_point, required=True)
    p.add_argument('--receiver', type=_point, required=True)
    p.add_argument('--max-order', type=int)
    p.add_argument('--no-tail', action='store_true', help='image sources only')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('build-dataset', help='render paired scenes and the evaluation line')
    p.add_argument('--out', required=True, help='dataset directory')
    p.add_argument('--corpus', help='directory of mono signals (synthetic corpus when omitted)')
    p.add_argument('--profiles', help='RT profile CSV (synthetic profiles when omitted)')
    p.add_argument('--test-profiles', help='RT profile CSV for the test split')
    p.add_argument('--train-rooms', type=int)
    p.add_argument('--val-rooms', type=int)
    p.add_argument('--test-rooms', type=int)
    p.set_defaults(handler=cmd_build_dataset)

    p = sub.add_parser('train-encoder', help='train the contrastive room encoder')
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True, help='checkpoint path')
    p.add_argument('--epochs', type=int)
    p.set_defaults(handler=cmd_train_encoder)

    p = sub.add_parser('train-generator', help='train the SRIR diffusion generator')
    p.add_argument('--manifest', required=True)
    p.add_argument('--encoder', required=True, help='room encoder checkpoint')
    p.add_argument('--out', required=True, help='checkpoint path')
    p.add_argument('--variant', choices=VARIANTS, default='proposed')
    p.add_argument('--epochs', type=int)
    p.set_defaults(handler=cmd_train_generator)

    p = sub.add_parser('infer', help='generate SRIRs from a scene and positions')
    p.add_argument('--model', required=True, help='generator checkpoint')
    p.add_argument('--encoder', required=True, help='room encoder checkpoint')
    p.add_argument('--scene', help='4-channel scene WAV')
    p.add_argument('--source', type=_point)
    p.add_argument('--receiver', type=_point)
    p.add_argument('--dataset', help='dataset directory: generate every evaluation position')
    p.add_argument('--variant', choices=VARIANTS)
    p.add_argument('--out', required=True, help='WAV path, or output directory with --dataset')
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser('evaluate', help='compare predicted and true SRIRs')
    p.add_argument('--pred', required=True, help='directory of predicted SRIRs')
    p.add_argument('--truth', required=True, help='directory of true SRIRs with the same file names')
    p.add_argument('--out', required=True, help='aggregate report CSV')
    p.add_argument('--label', default='', help='row label, e.g. the generator variant')
    p.add_argument('--method', choices=sorted(RT_METHODS), default='T30')
    p.add_argument('--doa-reference', choices=['geometric', 'estimated'], default='geometric')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('report', help='plot-data files from evaluation rows')
    p.add_argument('--rows', required=True, help='<report>_rows.csv written by evaluate')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(handler=cmd_report)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on a workbench error, 2 on a usage error"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_dir, args.log_level)
    try:
        settings = preset(args.scale)
        settings['seed'] = args.seed
        output = args.handler(args, settings)
        echo_config(output, args, settings)
    except (SRIRWorkbenchError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
