"""Observed data container: per-component times, values, noise knowledge."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["ObservationSet"]


@dataclass(frozen=True)
class ObservationSet:
    """Noisy observations, one (possibly empty) schedule per component.

    ``sigma_known[d]`` is the known noise sd for component d, or None when
    the noise level is to be inferred.  A component with no observation
    times is entirely unobserved.
    """

    component_names: tuple
    times: tuple
    values: tuple
    sigma_known: tuple

    def __post_init__(self):
        times = tuple(np.asarray(t, dtype=float) for t in self.times)
        values = tuple(np.asarray(v, dtype=float) for v in self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if not (len(self.component_names) == len(times) == len(values) == len(self.sigma_known)):
            raise ValueError("per-component fields must have equal length")
        for name, t, v in zip(self.component_names, times, values):
            if t.size != v.size:
                raise ValueError(f"component {name}: times and values differ in length")
            if t.size and np.any(np.diff(t) <= 0):
                raise ValueError(f"component {name}: observation times must be increasing")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                raise ValueError(f"component {name}: non-finite observation data")
        for name, s in zip(self.component_names, self.sigma_known):
            if s is not None and not (np.isfinite(s) and s > 0):
                raise ValueError(f"component {name}: known sigma must be positive")
        if self.total_count == 0:
            raise ValueError("at least one component must be observed")

    @property
    def dim(self) -> int:
        return len(self.component_names)

    @property
    def counts(self):
        return np.array([t.size for t in self.times])

    @property
    def total_count(self) -> int:
        return int(sum(t.size for t in self.times))

    @property
    def observed(self):
        """Boolean mask of components with at least one observation."""
        return np.array([t.size > 0 for t in self.times])

    def all_times(self):
        """Sorted union of all observation times."""
        return np.unique(np.concatenate([t for t in self.times if t.size]))

    def map_values(self, func) -> "ObservationSet":
        """New set with ``func`` applied to every observed value."""
        return replace(self, values=tuple(func(v) for v in self.values))
