from dataclasses import replace
from datetime import datetime
from time import time
from typing import Dict, Iterable, List, Optional, Sequence as SequenceType, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from batchgenerators.utilities.file_and_folder_operations import join, maybe_mkdir_p, save_json

from src.architectures.building_blocks import count_parameters
from src.architectures.conditional_codec import ConditionalVideoCodec, ReferenceState
from src.evaluation.quality_metrics import ms_ssim_tensor
from src.evaluation.results_io import write_run_manifest
from src.experiment_planning.experiment_config import (ExperimentConfig, TrainConfig, equal_group_boundaries,
                                                       finetune_schedule, save_experiment_config,
                                                       shifted_group_boundaries, validate_group_boundaries)
from src.training.checkpointing import save_checkpoint
from src.training.dataloading.sequence_io import Sequence
from src.training.dataloading.synthetic_sequences import generate
from src.utilities.exceptions import InputError
from src.utilities.graph_audit import graph_size

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def distortion(recon: torch.Tensor, x: torch.Tensor, kind: str = 'mse') -> torch.Tensor:
    if kind == 'mse':
        return F.mse_loss(recon, x)
    if kind == 'ms-ssim':
        return 1.0 - ms_ssim_tensor(recon, x)
    raise ValueError(f"Invalid distortion: {kind}")


def intra_state(model: ConditionalVideoCodec, sequence: Sequence) -> ReferenceState:
    recon, f_intra, _ = model.intra_frame(sequence.frame(0))
    return ReferenceState.from_intra(f_intra, recon)


def run_frames(model: ConditionalVideoCodec,
               sequence: Sequence,
               state: ReferenceState,
               start: int,
               stop: int,
               lmbda: float,
               distortion_kind: str = 'mse') -> Tuple[torch.Tensor, ReferenceState, List[dict]]:
    """
    Code frames start..stop-1 (sequence indices) chaining the propagated state, without
    detaching. Returns the summed per-frame loss R_t + lambda * D_t (R in bpp).
    """
    height, width = sequence.padded_size
    total = None
    records = []
    for t in range(start, stop):
        x = sequence.frame(t)
        out = model.forward_inter(x, state, sequence.flow(t))
        rate = out.bits / (height * width)
        dist = distortion(out.recon, x, distortion_kind)
        frame_loss = rate + lmbda * dist
        total = frame_loss if total is None else total + frame_loss
        state = out.next_state(state)
        records.append({'frame': t, 'rate': float(rate), 'distortion': float(dist), 'loss': float(frame_loss)})
    if total is None:
        raise InputError(f"Empty frame range [{start}, {stop})")
    return total, state, records


def _check_length(sequence: Sequence, frames: int):
    if len(sequence) < frames + 1:
        raise InputError(f"Training on {frames} inter frames needs {frames + 1} frames, sequence has {len(sequence)}")


def cascaded_loss(model: ConditionalVideoCodec, sequence: Sequence, lmbda: float, frames: int,
                  distortion_kind: str = 'mse') -> torch.Tensor:
    """sum_{t=1..T} R_t + lambda D_t with gradients flowing through every propagated feature."""
    _check_length(sequence, frames)
    loss, _, _ = run_frames(model, sequence, intra_state(model, sequence), 1, frames + 1, lmbda, distortion_kind)
    return loss


def make_optimizer(model: torch.nn.Module, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_update(params: Iterable[torch.Tensor], grads: Iterable[torch.Tensor], optimizer: torch.optim.Optimizer):
    """Apply one optimizer step with externally computed gradients."""
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.grad = None if g is None else g.detach().clone()
    optimizer.step()


def pcfs_step(model: ConditionalVideoCodec,
              sequence: Sequence,
              cfg: TrainConfig,
              optimizer: torch.optim.Optimizer,
              groups: Optional[SequenceType[int]] = None,
              audit: bool = False) -> Dict[str, object]:
    """
    One pass over the T frames split at `groups` (default cfg.groups): every group is
    forwarded from the detached state left by the previous group, backpropagated and
    followed by its own optimizer update.
    """
    groups = list(cfg.groups if groups is None else groups)
    validate_group_boundaries(groups, cfg.frames)
    _check_length(sequence, cfg.frames)

    params = [p for p in model.parameters() if p.requires_grad]
    state = None
    group_losses, group_graph_sizes, records = [], [], []
    for j in range(len(groups) - 1):
        if state is None:
            state = intra_state(model, sequence)
        else:
            state = state.detach()
        loss, state, frame_records = run_frames(model, sequence, state, groups[j] + 1, groups[j + 1] + 1,
                                                cfg.lmbda, cfg.distortion)
        if audit:
            group_graph_sizes.append(graph_size(loss))
        adam_update(params, torch.autograd.grad(loss, params, allow_unused=True), optimizer)
        group_losses.append(float(loss))
        records.extend(frame_records)

    return {
        'loss': float(sum(group_losses)),
        'rate': float(np.mean([r['rate'] for r in records])),
        'distortion': float(np.mean([r['distortion'] for r in records])),
        'group_losses': group_losses,
        'graph_sizes': group_graph_sizes,
        'groups': groups,
        'updates': len(groups) - 1,
    }


def cascaded_step(model: ConditionalVideoCodec, sequence: Sequence, cfg: TrainConfig,
                  optimizer: torch.optim.Optimizer, audit: bool = False) -> Dict[str, object]:
    return pcfs_step(model, sequence, cfg, optimizer, groups=[0, cfg.frames], audit=audit)


class CascadedCodecTrainer(object):
    """
    Trains the conditional codec on one synthetic (or loaded) sequence with the
    cascaded, PCFS or shifted-window PCFS strategy.
    """

    def __init__(self, config: ExperimentConfig, output_folder: Optional[str] = None,
                 model: Optional[ConditionalVideoCodec] = None, sequence: Optional[Sequence] = None,
                 verbose: bool = True):
        self.config = config
        self.train_config = config.train
        self.output_folder = output_folder or config.output_folder
        self.verbose = verbose
        maybe_mkdir_p(self.output_folder)

        timestamp = datetime.now()
        self.log_file = join(self.output_folder, "training_log_%d_%d_%d_%02.0d_%02.0d_%02.0d.txt" %
                             (timestamp.year, timestamp.month, timestamp.day, timestamp.hour, timestamp.minute,
                              timestamp.second))

        self.model = model if model is not None else ConditionalVideoCodec(config.model)
        self.model.entropy.reseed(self.train_config.seed)
        self.sequence = sequence if sequence is not None else self._build_sequence()
        self.optimizer = make_optimizer(self.model, self.train_config.learning_rate)
        self.current_step = 0
        self.log_rows: List[dict] = []
        self.stage_summaries: List[dict] = []

    def _build_sequence(self) -> Sequence:
        spec = self.config.sequence
        if spec.kind != 'file' and spec.frames < self.train_config.frames + 1:
            spec = replace(spec, frames=self.train_config.frames + 1)
        return generate(spec)

    def print_to_log_file(self, *args, also_print_to_console: bool = True, add_timestamp: bool = True):
        timestamp = time()
        dt_object = datetime.fromtimestamp(timestamp)
        if add_timestamp:
            args = (f"{dt_object}:", *args)
        with open(self.log_file, 'a+') as f:
            f.write(" ".join(str(a) for a in args))
            f.write("\n")
        if also_print_to_console and self.verbose:
            print(*args)

    def groups_for_step(self, step: int) -> List[int]:
        cfg = self.train_config
        if cfg.strategy == 'cascaded':
            return [0, cfg.frames]
        if cfg.strategy == 'pcfs-shifted' and step % 2 == 1:
            return shifted_group_boundaries(cfg.groups)
        return list(cfg.groups)

    def train_step(self, audit: bool = False) -> dict:
        self.model.train()
        metrics = pcfs_step(self.model, self.sequence, self.train_config, self.optimizer,
                            groups=self.groups_for_step(self.current_step), audit=audit)
        metrics['step'] = self.current_step
        self.current_step += 1
        return metrics

    def on_train_start(self):
        cfg = self.train_config
        save_experiment_config(self.config, join(self.output_folder, 'plans.json'))
        self.print_to_log_file(f"✓ Initialized {self.model.__class__.__name__} with "
                               f"{count_parameters(self.model):,} parameters, context mode "
                               f"'{self.config.model.context_mode}'")
        self.print_to_log_file(f"Strategy {cfg.strategy}: T={cfg.frames}, groups={cfg.groups}, "
                               f"lambda={cfg.lmbda}, lr={cfg.learning_rate}, steps={cfg.steps}")

    def run_training(self, steps: Optional[int] = None) -> List[dict]:
        steps = self.train_config.steps if steps is None else steps
        self.on_train_start()
        for _ in range(steps):
            metrics = self.train_step()
            row = {'step': metrics['step'], 'loss': metrics['loss'], 'rate': metrics['rate'],
                   'distortion': metrics['distortion'], 'frames': self.train_config.frames}
            for j, group_loss in enumerate(metrics['group_losses']):
                row[f'group_{j}_loss'] = group_loss
            self.log_rows.append(row)
            if not np.isfinite(metrics['loss']):
                self.print_to_log_file(f"⚠️ Non-finite loss at step {metrics['step']}")
            if metrics['step'] % self.train_config.log_every == 0:
                self.print_to_log_file(f"step {metrics['step']}: loss={metrics['loss']:.5f}, "
                                       f"rate={metrics['rate']:.5f} bpp, distortion={metrics['distortion']:.6f}")
        return self.log_rows

    def run_schedule(self, schedule: Optional[Dict[int, int]] = None) -> List[dict]:
        """Stage-wise fine-tuning through (frames, groups) stages, e.g. {6: 1, 20: 1, 38: 2, 55: 3}."""
        for frames, num_groups in finetune_schedule(schedule):
            self.train_config = replace(self.train_config, frames=frames, num_groups=num_groups,
                                        groups=equal_group_boundaries(frames, num_groups))
            if len(self.sequence) < frames + 1:
                self.sequence = self._build_sequence()
            self.print_to_log_file(f"Schedule stage: {frames} frames in {num_groups} group(s)")
            start = len(self.log_rows)
            self.run_training()
            losses = [r['loss'] for r in self.log_rows[start:]]
            self.stage_summaries.append({'frames': frames, 'groups': num_groups,
                                         'final_loss': losses[-1] if losses else None})
        return self.stage_summaries

    def save_log(self) -> str:
        path = join(self.output_folder, 'training_log.csv')
        pd.DataFrame(self.log_rows).to_csv(path, index=False)
        return path

    def on_train_end(self) -> dict:
        checkpoint_path = join(self.output_folder, 'checkpoint_final.nlvc')
        digest = save_checkpoint(self.model, checkpoint_path,
                                 extra={'experiment_hash': self.config.config_hash(), 'steps': self.current_step,
                                        'lmbda': self.train_config.lmbda, 'strategy': self.train_config.strategy})
        log_path = self.save_log()
        training_summary = {
            'total_steps': self.current_step,
            'strategy': self.train_config.strategy,
            'frames': self.train_config.frames,
            'groups': self.train_config.groups,
            'final_loss': self.log_rows[-1]['loss'] if self.log_rows else None,
            'stages': self.stage_summaries,
            'checkpoint_sha256': digest,
            'num_parameters': count_parameters(self.model),
        }
        save_json(training_summary, join(self.output_folder, 'training_summary.json'), sort_keys=True)
        write_run_manifest(join(self.output_folder, 'run_manifest.json'), self.config.to_dict(),
                           self.config.config_hash(), outputs=[checkpoint_path, log_path])
        self.print_to_log_file("Training completed. Final checkpoint and summary saved.")
        return training_summary
