"""Power-law tail exponents from the CCDF of cell-type counts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import TooFewCategories

CCDF_MODES = ("tail", "full")


@dataclass(frozen=True)
class TailFit:
    alpha: float
    r2: float
    num_points: int
    counts_used: tuple[int, ...]
    intercept: float = 0.0
    ccdf_mode: str = "tail"
    tail_fraction: float = 0.30

    def to_json(self) -> dict:
        d = asdict(self)
        d["counts_used"] = list(self.counts_used)
        return d


def tail_size(num_categories: int, tail_fraction: float) -> int:
    # small epsilon guards products like 0.3 * 10 = 3.0000000000000004 against 2.9999...
    return max(3, int(math.floor(tail_fraction * num_categories + 1e-9)))


def fit_tail_exponent(counts: Sequence[float], tail_fraction: float = 0.30, ccdf: str = "tail") -> TailFit:
    """Fit log CCDF against log count over the rarest categories; alpha is minus the slope.

    ``ccdf="tail"`` evaluates P(X >= x) among the rare categories only,
    ``ccdf="full"`` over every category. Duplicate counts collapse to a
    single CCDF point before the regression.
    """
    if ccdf not in CCDF_MODES:
        raise ValueError(f"ccdf must be one of {CCDF_MODES}")
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must be in (0, 1]")
    values = np.sort(np.asarray(counts, dtype=np.float64))
    if np.any(values <= 0):
        raise ValueError("counts must be positive")
    n_tail = tail_size(len(values), tail_fraction)
    if len(values) < n_tail:
        raise TooFewCategories(f"{len(values)} categories; at least 3 are needed for a tail fit")
    tail = values[:n_tail]
    reference = tail if ccdf == "tail" else values

    xs = np.unique(tail)
    if xs.size < 2:
        raise TooFewCategories("rare categories share a single count value")
    ccdf_vals = np.array([(reference >= x).sum() / reference.size for x in xs])
    lx, ly = np.log(xs), np.log(ccdf_vals)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return TailFit(
        alpha=float(-slope),
        r2=float(min(max(r2, 0.0), 1.0)),
        num_points=int(n_tail),
        counts_used=tuple(int(round(v)) for v in tail),
        intercept=float(intercept),
        ccdf_mode=ccdf,
        tail_fraction=float(tail_fraction),
    )


def load_counts(path: str | Path) -> dict[str, int]:
    """Read a JSON map type -> count, or a JSON list of counts."""
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, Mapping):
        return {str(k): int(v) for k, v in obj.items()}
    return {str(i): int(v) for i, v in enumerate(obj)}
