"""Token sequences: feature matrices with per-token role labels."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor

ROLES = ("vertex", "joint", "keypoint", "grid", "global")


@dataclass
class TokenSequence:
    """(T, D) features plus one role label per token."""

    features: Tensor
    roles: list[str]

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.roles) != self.features.shape[0]:
            raise ValueError(
                f"token features {self.features.shape} do not match {len(self.roles)} role labels"
            )
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown token roles {sorted(bad)}")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "TokenSequence":
        return TokenSequence(features, self.roles)
