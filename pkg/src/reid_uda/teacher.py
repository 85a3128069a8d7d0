"""Named parameter collections and the mean-teacher moving average."""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import CongruenceError


class ParameterStore(Mapping):
    """Ordered ``name -> float64 array`` map. Arrays are owned by the store."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        self._entries[name] = np.array(value, dtype=np.float64, copy=True)

    def __delitem__(self, name: str) -> None:
        del self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._entries.items())
        return f"ParameterStore({inner})"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def congruent(self, other: "ParameterStore") -> bool:
        return set(self) == set(other) and all(self[k].shape == other[k].shape for k in self)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self._entries)

    def equals(self, other: "ParameterStore") -> bool:
        return self.congruent(other) and all(np.array_equal(self[k], other[k]) for k in self)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self._entries.items() if k.startswith(prefix)}


@dataclass(frozen=True)
class EmaConfig:
    eta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")


def init_copy(pretrained: ParameterStore) -> tuple[ParameterStore, ParameterStore]:
    """Independent student and teacher copies of the pre-trained parameters."""
    return pretrained.copy(), pretrained.copy()


def ema_update(teacher: ParameterStore, student: ParameterStore, eta: float) -> ParameterStore:
    """``teacher <- eta * teacher + (1 - eta) * student`` entry-wise, in place.

    Returns ``teacher``.
    """
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    if not teacher.congruent(student):
        missing = set(teacher) ^ set(student)
        bad = [k for k in set(teacher) & set(student) if teacher[k].shape != student[k].shape]
        raise CongruenceError(f"stores differ: names {sorted(missing)}, shapes {sorted(bad)}")
    for name in teacher:
        t = teacher[name]
        t *= eta
        t += (1.0 - eta) * student[name]
    return teacher
