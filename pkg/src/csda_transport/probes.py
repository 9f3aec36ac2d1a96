"""Refinement-indicator reports shared by the regularity estimators."""
from dataclasses import dataclass, field

import numpy as np

DIVERGENT_RATIO = 1.2
BOUNDED_RATIO = 1.05


def verdict(values):
    """Classify a three-level refinement sequence.

    ``'divergent'`` needs both successive ratios >= 1.2 (so the values
    increase); ``'bounded'`` needs both ratios <= 1.05.  Anything else,
    including sequences whose first value is zero while later ones are not,
    is ``'inconclusive'``.
    """
    v = np.asarray(values, dtype=float)
    if v.size != 3 or not np.all(np.isfinite(v)) or np.any(v < 0):
        return "inconclusive"
    if np.all(v == 0):
        return "bounded"
    if np.any(v[:2] == 0):
        return "inconclusive"
    r = v[1:] / v[:2]
    if np.all(r >= DIVERGENT_RATIO) and v[2] > v[1] > v[0]:
        return "divergent"
    if np.all(r <= BOUNDED_RATIO):
        return "bounded"
    return "inconclusive"


@dataclass
class ProbeReport:
    quantity: str
    resolutions: list
    values: list
    stderr: list = None
    extra: dict = field(default_factory=dict)

    @property
    def ratios(self):
        v = self.values
        return [v[i + 1] / v[i] if v[i] != 0 else (1.0 if v[i + 1] == 0 else float("inf"))
                for i in range(len(v) - 1)]

    @property
    def verdict(self):
        return verdict(self.values)

    def to_dict(self):
        out = {"quantity": self.quantity,
               "resolutions": [r if isinstance(r, (int, str)) else float(r)
                               for r in self.resolutions],
               "values": [float(v) for v in self.values],
               "ratios": [float(r) for r in self.ratios],
               "verdict": self.verdict}
        if self.stderr is not None:
            out["stderr"] = [float(s) for s in self.stderr]
        if self.extra:
            out["extra"] = self.extra
        return out
