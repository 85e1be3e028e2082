#!/usr/bin/env python
"""
Desk-scale lab for a learned conditional video codec with multi-scale non-local
context mining and partial cascaded fine-tuning.
Main script for training, evaluation, BD-rate tables, attention benchmarks,
the error-propagation probe and attention-map dumps.
"""

import argparse
import sys
import traceback
from dataclasses import replace
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from batchgenerators.utilities.file_and_folder_operations import join, maybe_mkdir_p, save_json

from src.architectures.conditional_codec import ReferenceState
from src.evaluation.bd_rate import bd_rate_table, load_rd_curves
from src.evaluation.results_io import persist_results, write_run_manifest
from src.experiment_planning.experiment_config import (ExperimentConfig, SequenceSpec, apply_seed_override,
                                                       load_experiment_config)
from src.inference.attention_benchmark import run_attention_benchmark
from src.inference.sequence_coder import SequenceCoder, run_jobs
from src.training.cascaded_trainer import CascadedCodecTrainer
from src.training.checkpointing import load_checkpoint
from src.training.dataloading.sequence_io import Sequence, load_sequence
from src.training.dataloading.synthetic_sequences import different_instance_fraction, generate
from src.training.noise_probe import noise_probe
from src.utilities.exceptions import (BitstreamError, CodecIntegrityError, ConfigError, InputError,
                                      ResultsIOError, SchemaVersionError, UsageError)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CODEC = 3
EXIT_IO = 4


def exit_code_for(e: BaseException) -> int:
    if isinstance(e, (CodecIntegrityError, BitstreamError)):
        return EXIT_CODEC
    if isinstance(e, (ResultsIOError, SchemaVersionError, OSError)):
        return EXIT_IO
    if isinstance(e, (ConfigError, UsageError, InputError)):
        return EXIT_CONFIG
    return EXIT_FAILURE


def build_config(args) -> ExperimentConfig:
    """Plans file (or defaults) with command-line overrides applied."""
    config = load_experiment_config(args.plans) if args.plans else apply_seed_override(ExperimentConfig())
    train = config.train
    overrides = {}
    if args.strategy is not None:
        overrides['strategy'] = args.strategy
    if args.lmbda is not None:
        overrides['lmbda'] = args.lmbda
    if args.steps is not None:
        overrides['steps'] = args.steps
    if args.frames is not None or args.groups is not None:
        overrides['frames'] = args.frames if args.frames is not None else train.frames
        overrides['num_groups'] = args.groups if args.groups is not None else 1
        overrides['groups'] = None
    if args.seed is not None:
        overrides['seed'] = args.seed
        config.model = replace(config.model, seed=args.seed)
        config.sequence = replace(config.sequence, seed=args.seed)
    if overrides:
        config.train = replace(train, **overrides)
    if args.sequence is not None:
        config.sequence = replace(config.sequence, kind=args.sequence)
    if args.sequence_path is not None:
        config.sequence = replace(config.sequence, kind='file', path=args.sequence_path)
    if args.intra_period is not None:
        config.evaluation = replace(config.evaluation, intra_period=args.intra_period)
    if args.output_folder is not None:
        config.output_folder = args.output_folder
    return config


def build_sequence(spec: SequenceSpec, frames: Optional[int] = None) -> Sequence:
    if spec.kind == 'file':
        return load_sequence(spec.path)
    if frames is not None and spec.frames < frames:
        spec = replace(spec, frames=frames)
    return generate(spec)


def cmd_train(config: ExperimentConfig, schedule: bool = False, verbose: bool = True) -> dict:
    print(f"\n{'=' * 50}")
    print("Training conditional codec")
    print(f"Strategy: {config.train.strategy}, frames: {config.train.frames}, groups: {config.train.groups}")
    print(f"{'=' * 50}")
    trainer = CascadedCodecTrainer(config, verbose=verbose)
    if schedule:
        trainer.run_schedule()
    else:
        trainer.run_training()
    summary = trainer.on_train_end()
    print(f"✓ Checkpoint saved to {join(trainer.output_folder, 'checkpoint_final.nlvc')}")
    print(f"  sha256: {summary['checkpoint_sha256']}")
    return summary


def _evaluate_checkpoint(checkpoint: str, config: ExperimentConfig, frames: Optional[int]) -> dict:
    model, header = load_checkpoint(checkpoint)
    coder = SequenceCoder(model, intra_period=config.evaluation.intra_period, verify=config.evaluation.verify,
                          max_psnr=config.evaluation.max_psnr)
    sequence = build_sequence(config.sequence, frames)
    rows, aggregate = coder.evaluate(sequence, frames)
    # one RD curve per context-mining variant, one point per lambda
    aggregate = dict(aggregate, label=model.config.context_mode, sequence=sequence.name, checkpoint=checkpoint,
                     lmbda=header['extra'].get('lmbda', float('nan')))
    for row in rows:
        row['checkpoint'] = checkpoint
    return {'rows': rows, 'aggregate': aggregate}


def cmd_eval(config: ExperimentConfig, checkpoints: List[str], frames: Optional[int] = None,
             jobs: int = 1) -> pd.DataFrame:
    print(f"\n{'=' * 50}")
    print(f"Evaluating {len(checkpoints)} checkpoint(s), intra period {config.evaluation.intra_period}")
    print(f"{'=' * 50}")
    results = run_jobs(lambda c: _evaluate_checkpoint(c, config, frames), checkpoints, jobs)
    output_folder = config.output_folder
    maybe_mkdir_p(output_folder)
    digest = config.config_hash()
    frame_rows = [r for res in results for r in res['rows']]
    aggregates = [res['aggregate'] for res in results]
    persist_results(frame_rows, join(output_folder, 'eval_frames.csv'), digest, append=False)
    rd = persist_results(aggregates, join(output_folder, 'rd_points.csv'), digest, append=False)
    write_run_manifest(join(output_folder, 'eval_manifest.json'), config.to_dict(), digest,
                       outputs=['eval_frames.csv', 'rd_points.csv'], extra={'checkpoints': checkpoints})
    for a in aggregates:
        print(f"✓ {a['label']}: {a['frames']} frames ({a['intra_frames']} intra), bpp={a['bpp']:.4f}, "
              f"PSNR={a['psnr_db']:.2f} dB, MS-SSIM={a['msssim']:.4f}")
    return rd


def cmd_bdrate(test_csv: str, anchor_csv: str, quality: str = 'psnr_db',
               output: Optional[str] = None) -> pd.DataFrame:
    table = bd_rate_table(load_rd_curves(test_csv, quality), load_rd_curves(anchor_csv, quality))
    print(table.to_string(index=False))
    if output:
        persist_results(table.to_dict(orient='records'), output, append=False)
    return table


def cmd_bench(output_folder: str, lengths: Optional[List[int]], dim: int, heads: int, runs: int,
              seed: int) -> pd.DataFrame:
    print(f"\n{'=' * 50}")
    print(f"Attention scaling benchmark: d={dim}, heads={heads}")
    print(f"{'=' * 50}")
    df = run_attention_benchmark(output_folder, lengths, dim, heads, runs, seed)
    print(f"✓ Benchmark written to {output_folder}")
    return df


def cmd_probe(checkpoint: str, config: ExperimentConfig, inject_at: int, std: float,
              frames: Optional[int] = None) -> pd.DataFrame:
    model, _ = load_checkpoint(checkpoint)
    sequence = build_sequence(config.sequence, frames)
    report = noise_probe(model, sequence, inject_at, std, frames=frames, seed=config.train.seed)
    maybe_mkdir_p(config.output_folder)
    path = join(config.output_folder, f'noise_probe_at{inject_at}_std{std:g}.csv')
    persist_results(report.frames.to_dict(orient='records'), path, config.config_hash(), append=False)
    print(f"✓ Probe written to {path}; largest bpp increase at frame {report.peak_frame()}")
    return report.frames


def cmd_attention_map(checkpoint: str, config: ExperimentConfig, frame: int = 2, scale: int = 0) -> float:
    """Dump the arg-max key grid of frame `frame` (1-based, inter) and the cross-instance fraction."""
    model, _ = load_checkpoint(checkpoint)
    model.eval()
    sequence = build_sequence(config.sequence, frame)
    if not 2 <= frame <= len(sequence):
        raise InputError(f"Attention maps need an inter frame in [2, {len(sequence)}], got {frame}")
    recon, f_intra, _ = model.intra_frame(sequence.frame(0))
    state = ReferenceState.from_intra(f_intra, recon)
    with torch.no_grad():
        for t in range(1, frame - 1):
            state = model.forward_inter(sequence.frame(t), state, sequence.flow(t), training=False).next_state(state)
    t = frame - 1
    argmax = model.attention_argmax(sequence.frame(t), state, sequence.flow(t), scale)[0].numpy()
    height, width = sequence.padded_size
    h, w = height >> scale, width >> scale
    maybe_mkdir_p(config.output_folder)
    path = join(config.output_folder, f'attention_argmax_frame{frame}_scale{scale}.csv')
    pd.DataFrame(argmax.reshape(h, w)).to_csv(path, index=False, header=False)
    fraction = float('nan')
    instances = sequence.annotations.get('instances')
    if instances is not None and scale == 0:
        fraction = different_instance_fraction(argmax, np.asarray(instances[t]), np.asarray(instances[t - 1]))
    save_json({'frame': frame, 'scale': scale, 'different_instance_fraction': fraction,
               'argmax_csv': path}, join(config.output_folder, f'attention_map_frame{frame}.json'), sort_keys=True)
    print(f"✓ Attention map written to {path}; cross-instance fraction {fraction:.3f}")
    return fraction


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Conditional video codec lab')
    parser.add_argument('--mode', choices=['train', 'eval', 'bdrate', 'bench', 'probe', 'attention_map'],
                        default='train', help='Mode to run')
    parser.add_argument('--plans', type=str, help='JSON experiment plans file')
    parser.add_argument('--output_folder', type=str, help='Output folder (overrides the plans)')
    parser.add_argument('--verbose', action='store_true', default=False, help='Verbose output')

    # Training arguments
    parser.add_argument('--strategy', choices=['cascaded', 'pcfs', 'pcfs-shifted'], help='Training strategy')
    parser.add_argument('--frames', type=int, help='Inter frames per training sample / frames to code')
    parser.add_argument('--groups', type=int, help='Number of equal fine-tuning groups')
    parser.add_argument('--lambda', dest='lmbda', type=float, help='Rate-distortion trade-off')
    parser.add_argument('--steps', type=int, help='Training steps')
    parser.add_argument('--seed', type=int, help='Seed for model, sequence and training')
    parser.add_argument('--schedule', action='store_true', help='Run the staged fine-tuning preset')
    parser.add_argument('--sequence', choices=['translation', 'repeated_motif', 'fast_motion', 'static'],
                        help='Synthetic sequence kind')
    parser.add_argument('--sequence_path', type=str, help='PNM directory or raw file to code')

    # Evaluation arguments
    parser.add_argument('--checkpoint', nargs='+', help='Checkpoint file(s)')
    parser.add_argument('--intra-period', dest='intra_period', type=int, help='Intra period N, or -1')
    parser.add_argument('--jobs', type=int, default=1, help='Parallel (sequence, lambda) work items')

    # BD-rate arguments
    parser.add_argument('--test', type=str, help='RD table of the tested codec')
    parser.add_argument('--anchor', type=str, help='RD table of the anchor')
    parser.add_argument('--quality', choices=['psnr_db', 'msssim'], default='psnr_db')
    parser.add_argument('--output', type=str, help='Output CSV for the BD-rate table')

    # Benchmark arguments
    parser.add_argument('--lengths', type=int, nargs='+', help='Attention lengths L = H*W')
    parser.add_argument('--dim', type=int, default=16, help='Embedding width d')
    parser.add_argument('--heads', type=int, default=1, help='Attention heads')
    parser.add_argument('--runs', type=int, default=20, help='Timed runs per point')

    # Probe / attention-map arguments
    parser.add_argument('--inject-at', dest='inject_at', type=int, default=3, help='1-based frame to perturb')
    parser.add_argument('--std', type=float, default=1.0, help='Noise standard deviation')
    parser.add_argument('--frame', type=int, default=2, help='1-based frame for attention maps')
    parser.add_argument('--scale', type=int, default=0, choices=[0, 1, 2], help='Attention scale')
    return parser


def _require(value, flag: str):
    if not value:
        raise UsageError(f"--mode needs {flag}")
    return value


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)

    print("Conditional Video Codec Lab")
    print("===========================")

    try:
        if args.mode == 'bdrate':
            cmd_bdrate(_require(args.test, '--test'), _require(args.anchor, '--anchor'), args.quality, args.output)
        elif args.mode == 'bench':
            config = build_config(args)
            cmd_bench(config.output_folder, args.lengths, args.dim, args.heads, args.runs, config.train.seed)
        else:
            config = build_config(args)
            if args.mode == 'train':
                print("\nMode: Training")
                cmd_train(config, schedule=args.schedule, verbose=True)
            elif args.mode == 'eval':
                print("\nMode: Evaluation")
                cmd_eval(config, _require(args.checkpoint, '--checkpoint'), args.frames, args.jobs)
            elif args.mode == 'probe':
                print("\nMode: Noise probe")
                cmd_probe(_require(args.checkpoint, '--checkpoint')[0], config, args.inject_at, args.std,
                          args.frames)
            elif args.mode == 'attention_map':
                print("\nMode: Attention map")
                cmd_attention_map(_require(args.checkpoint, '--checkpoint')[0], config, args.frame, args.scale)
    except Exception as e:
        print(f"✗ {args.mode} failed: {e}")
        if args.verbose:
            traceback.print_exc()
        return exit_code_for(e)

    print(f"\n✓ {args.mode} completed successfully!")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
