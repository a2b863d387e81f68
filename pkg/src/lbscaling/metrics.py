"""Steady-state metric container shared by the exact solver and the simulator."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class MetricsEstimate:
    """Stationary metrics with standard errors (zero for exact results).

    ``ES[i-1]`` is the mean fraction of servers with at least ``i`` jobs.
    ``level_frac[i]`` is the fraction of arrivals routed to a server
    holding exactly ``i`` jobs, with ``level_frac[b]`` the blocked share;
    ``p_W``, ``p_B`` and ``EW`` are derived from it. ``Eh[r-1]`` is the
    mean of the truncated distance raised to the power ``r``.
    """

    ES: np.ndarray
    ES_se: np.ndarray
    level_frac: np.ndarray
    level_frac_se: np.ndarray
    p_W: float
    p_W_se: float
    p_B: float
    p_B_se: float
    EW: float
    EW_se: float
    Eh: np.ndarray
    Eh_se: np.ndarray
    kbar: float
    exact: bool = False
    events: int = 0
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)
    batches: Optional[dict] = None

    @property
    def b(self) -> int:
        return len(self.ES)

    @property
    def ES_total(self) -> float:
        return float(np.sum(self.ES))

    @property
    def EA2(self) -> float:
        """Mean probability of routing to a server holding two or more jobs."""
        return float(np.sum(self.level_frac[2:])) if self.b >= 2 else 0.0

    def scalar_metrics(self) -> dict:
        """Name -> (value, se) for every scalar metric."""
        out = {}
        for i, (v, s) in enumerate(zip(self.ES, self.ES_se), start=1):
            out[f"ES{i}"] = (float(v), float(s))
        out["p_W"] = (self.p_W, self.p_W_se)
        out["p_B"] = (self.p_B, self.p_B_se)
        out["EW"] = (self.EW, self.EW_se)
        for r, (v, s) in enumerate(zip(self.Eh, self.Eh_se), start=1):
            out[f"Eh{r}"] = (float(v), float(s))
        return out

    def fingerprint(self) -> str:
        """Hash of every numeric field except wall time."""
        h = hashlib.sha256()
        for arr in (self.ES, self.ES_se, self.level_frac, self.level_frac_se, self.Eh, self.Eh_se):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(np.array([self.p_W, self.p_W_se, self.p_B, self.p_B_se, self.EW, self.EW_se,
                           self.kbar, self.events], dtype=np.float64).tobytes())
        if self.batches:
            for key in sorted(self.batches):
                h.update(key.encode())
                h.update(np.ascontiguousarray(self.batches[key]).tobytes())
        return h.hexdigest()


def batch_se(values: np.ndarray) -> np.ndarray:
    """Standard error of the mean of batch values along axis 0."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2:
        return np.full(values.shape[1:], np.nan)
    return np.std(values, axis=0, ddof=1) / np.sqrt(n)


def truncated_excess(x, kbar: float, N: int, alpha: float):
    """``max(x - 1 - kbar*log(N)/N**(1-alpha), 0)``, elementwise; natural log."""
    level = 1.0 + kbar * np.log(N) / float(N) ** (1.0 - alpha)
    return np.maximum(np.asarray(x, dtype=float) - level, 0.0)
