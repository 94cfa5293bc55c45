"""Linear heads standing in for the detector's fully connected layers."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from finedet.errors import ValidationError


@dataclass
class HeadParameters:
    coarse_w: np.ndarray  # (D, C_f + 1), background last
    coarse_b: np.ndarray
    box_w: np.ndarray  # (D, 4)
    box_b: np.ndarray
    fine_w: np.ndarray  # (D, C_w)
    fine_b: np.ndarray

    @classmethod
    def init(cls, dim: int, n_coarse: int, n_fine: int, rng, scale: float = 0.01) -> "HeadParameters":
        return cls(
            scale * rng.standard_normal((dim, n_coarse + 1)), np.zeros(n_coarse + 1),
            scale * rng.standard_normal((dim, 4)), np.zeros(4),
            scale * rng.standard_normal((dim, n_fine)), np.zeros(n_fine),
        )

    @classmethod
    def zeros_like(cls, other: "HeadParameters") -> "HeadParameters":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def dim(self) -> int:
        return self.coarse_w.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.coarse_w.shape[1] - 1

    @property
    def n_fine(self) -> int:
        return self.fine_w.shape[1]

    def copy(self) -> "HeadParameters":
        return HeadParameters(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, x) -> "HeadParameters":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(x[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return HeadParameters(*out)

    def step(self, grad: "HeadParameters", lr: float) -> None:
        for a, g in zip(self.arrays(), grad.arrays()):
            a -= lr * g

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def check_features(self, features) -> None:
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ValidationError(f"features of shape {features.shape} do not match head dimension {self.dim}")

    def coarse_logits(self, x):
        return x @ self.coarse_w + self.coarse_b

    def box_deltas(self, x):
        return x @ self.box_w + self.box_b

    def fine_logits(self, x):
        return x @ self.fine_w + self.fine_b

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "HeadParameters":
        return cls(**{f.name: np.asarray(d[f.name], dtype=np.float64) for f in fields(cls)})
