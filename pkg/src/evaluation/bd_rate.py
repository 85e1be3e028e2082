"""
Bjontegaard delta rate with a monotone piecewise cubic Hermite fit of log10(rate)
against quality, integrated exactly over the common quality interval.
"""
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from src.utilities.exceptions import InputError, MetricUndefinedError, ResultsIOError

RD_COLUMNS = ('label', 'bpp', 'psnr_db', 'msssim')
QUALITY_COLUMNS = ('psnr_db', 'msssim')
MIN_POINTS = 4


@dataclass
class RDCurve:
    label: str
    points: List[Tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted((float(r), float(q)) for r, q in self.points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def violations(self) -> List[str]:
        issues = []
        rates, qualities = self.rates, self.qualities
        if np.any(np.diff(rates) <= 0):
            issues.append('bpp not strictly increasing')
        if np.any(np.diff(qualities) < 0):
            issues.append('quality decreases with rate')
        return issues


def _log_rate_fit(curve: RDCurve) -> PchipInterpolator:
    if len(curve.points) < MIN_POINTS:
        raise MetricUndefinedError(f"Curve '{curve.label}' has {len(curve.points)} points, BD-rate needs {MIN_POINTS}")
    rates, qualities = curve.rates, curve.qualities
    if np.any(rates <= 0):
        raise MetricUndefinedError(f"Curve '{curve.label}' has non-positive rates")
    for issue in curve.violations():
        warnings.warn(f"RD curve '{curve.label}': {issue}")
    order = np.argsort(qualities)
    qualities, log_rates = qualities[order], np.log10(rates[order])
    if np.any(np.diff(qualities) == 0):
        raise MetricUndefinedError(f"Curve '{curve.label}' has duplicate quality values")
    return PchipInterpolator(qualities, log_rates)


def common_interval(test: RDCurve, anchor: RDCurve) -> Tuple[float, float]:
    low = max(test.qualities.min(), anchor.qualities.min())
    high = min(test.qualities.max(), anchor.qualities.max())
    if low >= high:
        raise MetricUndefinedError(f"Curves '{test.label}' and '{anchor.label}' share no quality range")
    return float(low), float(high)


def bd_rate(test: RDCurve, anchor: RDCurve) -> float:
    """Average rate difference of `test` against `anchor` at equal quality, in percent."""
    fit_test = _log_rate_fit(test)
    fit_anchor = _log_rate_fit(anchor)
    low, high = common_interval(test, anchor)
    delta = (fit_test.integrate(low, high) - fit_anchor.integrate(low, high)) / (high - low)
    return float(100.0 * (10.0 ** delta - 1.0))


def curves_from_frame(df: pd.DataFrame, quality: str = 'psnr_db') -> Dict[str, RDCurve]:
    if quality not in QUALITY_COLUMNS:
        raise InputError(f"Quality column must be one of {QUALITY_COLUMNS}, got {quality}")
    missing = {'label', 'bpp', quality} - set(df.columns)
    if missing:
        raise InputError(f"RD table lacks columns {sorted(missing)}")
    return {str(label): RDCurve(str(label), list(zip(group['bpp'], group[quality])))
            for label, group in df.groupby('label', sort=True)}


def load_rd_curves(path: str, quality: str = 'psnr_db') -> Dict[str, RDCurve]:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ResultsIOError(path, f"Could not read RD table: {e}") from e
    return curves_from_frame(df, quality)


def bd_rate_table(test: Dict[str, RDCurve], anchor: Dict[str, RDCurve]) -> pd.DataFrame:
    """One row per label present in both tables; a single-curve anchor is compared with every test curve."""
    rows = []
    if len(anchor) == 1:
        anchor_curve = next(iter(anchor.values()))
        pairs = [(label, curve, anchor_curve) for label, curve in test.items()]
    else:
        pairs = [(label, test[label], anchor[label]) for label in sorted(set(test) & set(anchor))]
    if not pairs:
        raise MetricUndefinedError("No curve labels in common between test and anchor tables")
    for label, t, a in pairs:
        rows.append({'label': label, 'anchor': a.label, 'bd_rate_percent': bd_rate(t, a)})
    return pd.DataFrame(rows)
