"""
Wall-clock and multiply-add scaling of vanilla vs linear cross attention.
"""
import json
import platform
import time
from datetime import datetime
from typing import Dict, List, Optional, Sequence as SequenceType

import numpy as np
import pandas as pd
import psutil
import torch
from batchgenerators.utilities.file_and_folder_operations import join, maybe_mkdir_p

from src.architectures.attention import AttentionConfig, linear_cross_attention, op_count, vanilla_cross_attention
from src.utilities.exceptions import ResultsIOError
from src.utilities.tensor_ops import DTYPE

BENCH_COLUMNS = ('mode', 'L', 'd', 'heads', 'mul_adds', 'wall_ns')
# The vanilla similarity buffer grows with L^2; keep it below ~128 MiB of float64.
MAX_VANILLA_LENGTH = 4096


class AttentionScalingBenchmark:
    """
    Times both attention forms on random (heads, L, d/heads) operands with L = L'.
    Lengths are given as side lengths squared (H = W) or directly as L.
    """

    def __init__(self,
                 lengths: SequenceType[int] = (256, 1024, 4096),
                 embed_dim: int = 16,
                 num_heads: int = 1,
                 num_runs: int = 20,
                 warmup: int = 2,
                 seed: int = 0,
                 max_vanilla_length: int = MAX_VANILLA_LENGTH,
                 verbose: bool = True):
        self.config = AttentionConfig(embed_dim, num_heads)
        self.lengths = sorted(int(l) for l in lengths)
        self.num_runs = num_runs
        self.warmup = warmup
        self.seed = seed
        self.max_vanilla_length = max_vanilla_length
        self.verbose = verbose
        self.results = {
            'config': {'lengths': self.lengths, 'embed_dim': embed_dim, 'num_heads': num_heads,
                       'num_runs': num_runs, 'warmup': warmup, 'seed': seed},
            'system_info': self.get_system_info(),
            'benchmark_results': {},
        }

    @staticmethod
    def get_system_info() -> Dict:
        """Collect system information for the benchmark report."""
        try:
            return {
                'timestamp': datetime.now().isoformat(),
                'cpu_count': psutil.cpu_count(),
                'cpu_count_physical': psutil.cpu_count(logical=False),
                'memory_total_gb': round(psutil.virtual_memory().total / (1024 ** 3), 2),
                'python_version': platform.python_version(),
                'torch_version': torch.__version__,
                'torch_threads': torch.get_num_threads(),
            }
        except Exception as e:
            return {'error': str(e), 'timestamp': datetime.now().isoformat()}

    def _operands(self, length: int):
        generator = torch.Generator().manual_seed(self.seed + length)
        shape = (self.config.num_heads, length, self.config.head_dim)
        return tuple(torch.randn(shape, generator=generator, dtype=DTYPE) for _ in range(3))

    def time_one(self, mode: str, length: int) -> int:
        """Median wall time in nanoseconds over num_runs evaluations."""
        q, k, v = self._operands(length)
        fn = linear_cross_attention if mode == 'linear' else (lambda a, b, c: vanilla_cross_attention(a, b, c).output)
        times = []
        with torch.no_grad():
            for i in range(self.warmup + self.num_runs):
                start = time.perf_counter_ns()
                fn(q, k, v)
                elapsed = time.perf_counter_ns() - start
                if i >= self.warmup:
                    times.append(elapsed)
        return int(np.median(times))

    def run(self, modes: SequenceType[str] = ('linear', 'vanilla')) -> pd.DataFrame:
        rows = []
        for mode in modes:
            for length in self.lengths:
                if mode == 'vanilla' and length > self.max_vanilla_length:
                    if self.verbose:
                        print(f"⚠️ Skipping vanilla attention at L={length} (> {self.max_vanilla_length})")
                    continue
                wall_ns = self.time_one(mode, length)
                rows.append({
                    'mode': mode,
                    'L': length,
                    'd': self.config.embed_dim,
                    'heads': self.config.num_heads,
                    # op_count takes (H, W); L = L x 1 gives the same count
                    'mul_adds': op_count(mode, length, 1, self.config.embed_dim, self.config.num_heads),
                    'wall_ns': wall_ns,
                })
                if self.verbose:
                    print(f"  {mode:>7} L={length:>6}: {wall_ns / 1e6:.3f} ms, {rows[-1]['mul_adds']:,} mul-adds")
        df = pd.DataFrame(rows, columns=list(BENCH_COLUMNS))
        self.results['benchmark_results'] = {'rows': df.to_dict(orient='records'),
                                             'scaling': scaling_summary(df)}
        return df

    def save(self, df: pd.DataFrame, output_folder: str, prefix: str = 'attention_bench') -> Dict[str, str]:
        maybe_mkdir_p(output_folder)
        csv_path = join(output_folder, f'{prefix}.csv')
        json_path = join(output_folder, f'{prefix}_report.json')
        try:
            df.to_csv(csv_path, index=False)
            with open(json_path, 'w') as f:
                json.dump(self.results, f, indent=2, default=str)
        except OSError as e:
            raise ResultsIOError(output_folder, f"Could not write benchmark report: {e}") from e
        return {'csv': csv_path, 'json': json_path}


def scaling_summary(df: pd.DataFrame) -> Dict[str, List[Dict[str, float]]]:
    """Per mode: wall-time and mul-add growth between consecutive lengths."""
    summary = {}
    for mode, group in df.groupby('mode', sort=True):
        group = group.sort_values('L')
        steps = []
        for (_, a), (_, b) in zip(group.iterrows(), group.iloc[1:].iterrows()):
            steps.append({'L_from': int(a['L']), 'L_to': int(b['L']),
                          'length_ratio': float(b['L'] / a['L']),
                          'time_ratio': float(b['wall_ns'] / max(a['wall_ns'], 1)),
                          'mul_add_ratio': float(b['mul_adds'] / a['mul_adds'])})
        summary[str(mode)] = steps
    return summary


def linear_vanilla_ratio(height: int, width: int, d: int) -> float:
    return op_count('linear', height, width, d) / op_count('vanilla', height, width, d)


def run_attention_benchmark(output_folder: str, lengths: Optional[SequenceType[int]] = None, embed_dim: int = 16,
                            num_heads: int = 1, num_runs: int = 20, seed: int = 0,
                            verbose: bool = True) -> pd.DataFrame:
    bench = AttentionScalingBenchmark(lengths or (256, 1024, 4096), embed_dim, num_heads, num_runs,
                                      seed=seed, verbose=verbose)
    df = bench.run()
    bench.save(df, output_folder)
    return df
