"""
Synthetic sequences with exact ground-truth motion.

All scenes are evaluated analytically at every frame (no resampling), so the flow
of a translating texture is exact for fractional velocities as well.
"""
from typing import Optional, Tuple

import numpy as np
import torch

from src.experiment_planning.experiment_config import SequenceSpec
from src.training.dataloading.sequence_io import Sequence, load_sequence, make_sequence
from src.utilities.tensor_ops import DTYPE

DEFAULT_VELOCITY = {
    'translation': (1.0, 0.0),
    'fast_motion': (9.5, 2.5),
    'static': (0.0, 0.0),
}
MIN_WAVELENGTH = 16.0
TEXTURE_LOW, TEXTURE_HIGH = 0.15, 0.85
STATIC_NOISE_FLOOR = 0.01
MOTIF_BACKGROUND = 0.3
MOTIF_COLOR = (0.55, 0.35, 0.15)


class SineTexture:
    """Sum of oriented sinusoids per channel, wavelengths >= 16 px, values in [0.15, 0.85]."""

    def __init__(self, rng: np.random.Generator, components: int = 4):
        self.components = components
        self.frequencies = []
        self.phases = rng.uniform(0, 2 * np.pi, size=(3, components))
        for _ in range(3 * components):
            wavelength = rng.uniform(MIN_WAVELENGTH, 3 * MIN_WAVELENGTH)
            angle = rng.uniform(0, np.pi)
            k = 2 * np.pi / wavelength
            self.frequencies.append((k * np.cos(angle), k * np.sin(angle)))
        self.frequencies = np.asarray(self.frequencies).reshape(3, components, 2)

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        out = np.zeros((3,) + xs.shape)
        for c in range(3):
            for j in range(self.components):
                kx, ky = self.frequencies[c, j]
                out[c] += np.sin(kx * xs + ky * ys + self.phases[c, j])
        out /= self.components
        mid = 0.5 * (TEXTURE_LOW + TEXTURE_HIGH)
        half = 0.5 * (TEXTURE_HIGH - TEXTURE_LOW)
        return mid + half * out


def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing='ij')
    return xs, ys


def generate_translation(spec: SequenceSpec, velocity: Tuple[float, float]):
    rng = np.random.default_rng(spec.seed)
    texture = SineTexture(rng)
    xs, ys = _grid(spec.height, spec.width)
    vx, vy = velocity
    frames = np.stack([texture(xs - vx * t, ys - vy * t) for t in range(spec.frames)])
    flows = np.zeros((spec.frames, 2, spec.height, spec.width))
    flows[1:, 0] = vx
    flows[1:, 1] = vy
    return frames, flows, {'velocity': (vx, vy)}


def generate_static(spec: SequenceSpec):
    rng = np.random.default_rng(spec.seed)
    texture = SineTexture(rng)
    xs, ys = _grid(spec.height, spec.width)
    base = texture(xs, ys)
    noise_std = spec.noise_std if spec.noise_std > 0 else STATIC_NOISE_FLOOR
    frames = np.stack([base + noise_std * rng.standard_normal(base.shape) for _ in range(spec.frames)])
    frames = np.clip(frames, 0.0, 1.0)
    flows = np.zeros((spec.frames, 2, spec.height, spec.width))
    return frames, flows, {'noise_std': noise_std}


def motif_centers(spec: SequenceSpec, rng: np.random.Generator) -> np.ndarray:
    """(frames, K, 2) motif centers (x, y); each instance jitters on its own sinusoid."""
    g = spec.motif_grid
    cell_x = spec.width / g
    cell_y = spec.height / g
    # integer anchors: without jitter every instance sits on the same sub-pixel phase
    base = np.round(np.array([((i + 0.5) * cell_x, (j + 0.5) * cell_y) for j in range(g) for i in range(g)]))
    k = base.shape[0]
    amplitude = spec.motif_jitter
    omega = rng.uniform(0.2, 0.6, size=(k, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(k, 2))
    t = np.arange(spec.frames, dtype=np.float64)[:, None, None]
    return base[None] + amplitude * np.sin(omega[None] * t + phase[None])


def raised_cosine(distance: np.ndarray, radius: float) -> np.ndarray:
    inside = distance < radius
    return np.where(inside, 0.5 * (1 + np.cos(np.pi * np.minimum(distance / radius, 1.0))), 0.0)


def generate_repeated_motif(spec: SequenceSpec):
    rng = np.random.default_rng(spec.seed)
    centers = motif_centers(spec, rng)
    radius = spec.motif_radius
    xs, ys = _grid(spec.height, spec.width)
    color = np.asarray(MOTIF_COLOR)[:, None, None]

    frames = np.empty((spec.frames, 3, spec.height, spec.width))
    flows = np.zeros((spec.frames, 2, spec.height, spec.width))
    instances = np.full((spec.frames, spec.height, spec.width), -1, dtype=np.int64)
    for t in range(spec.frames):
        frame = np.full((3, spec.height, spec.width), MOTIF_BACKGROUND)
        for k, (cx, cy) in enumerate(centers[t]):
            distance = np.hypot(xs - cx, ys - cy)
            frame = frame + color * raised_cosine(distance, radius)[None]
            instances[t][distance < radius] = k
            if t > 0:
                v = centers[t, k] - centers[t - 1, k]
                support = distance <= radius + np.hypot(*v) + 1
                flows[t, 0][support] = v[0]
                flows[t, 1][support] = v[1]
        frames[t] = np.clip(frame, 0.0, 1.0)
    annotations = {'centers': centers, 'instances': instances, 'radius': radius}
    return frames, flows, annotations


def generate(spec: SequenceSpec) -> Sequence:
    """Deterministic synthetic sequence (frames + ground-truth flows) for `spec`."""
    if spec.kind == 'file':
        return load_sequence(spec.path)
    if spec.kind == 'repeated_motif':
        frames, flows, annotations = generate_repeated_motif(spec)
    elif spec.kind == 'static':
        frames, flows, annotations = generate_static(spec)
    else:
        velocity = spec.velocity if spec.velocity is not None else DEFAULT_VELOCITY[spec.kind]
        frames, flows, annotations = generate_translation(spec, velocity)
    annotations['kind'] = spec.kind
    return make_sequence(torch.from_numpy(frames).to(DTYPE), fps=spec.fps,
                         flows=torch.from_numpy(flows).to(DTYPE), annotations=annotations,
                         name=f'{spec.kind}_{spec.height}x{spec.width}_s{spec.seed}')


def different_instance_fraction(argmax: np.ndarray, instances: np.ndarray,
                                key_instances: Optional[np.ndarray] = None) -> float:
    """
    Share of motif query positions whose arg-max key lies on another motif instance.

    Args:
        argmax: (L,) flat key index per query position
        instances: (H, W) instance id per query position, -1 for background
        key_instances: (H, W) instance map of the key frame, defaults to `instances`
    """
    flat = instances.reshape(-1)
    key_flat = flat if key_instances is None else key_instances.reshape(-1)
    queries = np.nonzero(flat >= 0)[0]
    if queries.size == 0:
        return 0.0
    keys = key_flat[np.asarray(argmax).reshape(-1)[queries]]
    return float(np.mean((keys >= 0) & (keys != flat[queries])))
