"""Training set with per-entry sampling weights and provenance."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .world import Scenario

ORIGINAL = "original"
GENERATED = "generated"


@dataclass
class Entry:
    scenario: Scenario
    weight: float = 1.0
    provenance: str = ORIGINAL
    parent_id: int | None = None
    categories: tuple | None = None  # per-agent AgentCategory values for generated entries

    @property
    def generated(self) -> bool:
        return self.provenance == GENERATED


class WeightedDataset:
    """List of :class:`Entry` with sampling weights.

    Generated entries reference the ``scenario_id`` of the original they were
    derived from through ``parent_id``.
    """

    def __init__(self, entries: Iterable[Entry] = ()):
        self.entries = list(entries)
        self._index = {e.scenario.scenario_id: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_scenarios(cls, scenarios, weight: float = 1.0) -> "WeightedDataset":
        return cls(Entry(s, weight) for s in scenarios)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> Entry:
        return self.entries[i]

    @property
    def scenarios(self) -> list:
        return [e.scenario for e in self.entries]

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries], dtype=float)

    def generated_mask(self) -> np.ndarray:
        return np.array([e.generated for e in self.entries], dtype=bool)

    @property
    def n_generated(self) -> int:
        return int(self.generated_mask().sum())

    @property
    def n_original(self) -> int:
        return len(self) - self.n_generated

    def entry_for(self, scenario_id: int) -> Entry:
        return self.entries[self._index[scenario_id]]

    def next_scenario_id(self) -> int:
        return max(self._index, default=-1) + 1

    def append(self, entry: Entry) -> None:
        sid = entry.scenario.scenario_id
        if sid in self._index:
            raise ValueError(f"duplicate scenario_id {sid}")
        self._index[sid] = len(self.entries)
        self.entries.append(entry)

    def with_weights(self, weights) -> "WeightedDataset":
        return WeightedDataset(replace(e, weight=float(w)) for e, w in zip(self.entries, weights))

    def copy(self) -> "WeightedDataset":
        return WeightedDataset(replace(e) for e in self.entries)

    def weight_summary(self) -> dict:
        w = self.weights()
        gen = self.generated_mask()
        if len(w) == 0:
            return {"n": 0}
        return {
            "n": int(len(w)),
            "n_original": int((~gen).sum()),
            "n_generated": int(gen.sum()),
            "min": float(w.min()),
            "max": float(w.max()),
            "mean": float(w.mean()),
            "generated_mass": float(w[gen].sum() / w.sum()),
        }
