"""Readability label record shared by the dataset and classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Fixed serialization order for the four readability bits.
LABEL_NAMES = ("valid", "macula", "optic_disc", "retina")


@dataclass(frozen=True)
class ReadabilityLabels:
    valid: bool
    macula: bool
    optic_disc: bool
    retina: bool

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.valid, self.macula, self.optic_disc, self.retina],
            dtype=np.float32,
        )

    @classmethod
    def from_array(cls, arr) -> "ReadabilityLabels":
        a = [bool(v) for v in arr]
        if len(a) != 4:
            raise ValueError(f"expected 4 label bits, got {len(a)}")
        return cls(*a)

    @property
    def all_readable(self) -> bool:
        return self.valid and self.macula and self.optic_disc and self.retina
