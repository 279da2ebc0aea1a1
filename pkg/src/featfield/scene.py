"""SceneModel: the trained coarse/fine field pair plus scene metadata."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .field import Field


@dataclass
class SceneModel:
    """Trained radiance + feature fields and what a renderer needs to use them.

    `feature_from` names the net whose feature head is the semantic field
    (it follows the sampling mode the features were distilled with); queries
    and feature renders always evaluate that net.
    """

    coarse: Field
    fine: Field
    near: float
    far: float
    feature_from: str = "coarse"
    table: object | None = None  # QueryEmbeddingTable, when known

    def __post_init__(self):
        if self.feature_from not in ("coarse", "fine"):
            raise InputError("feature_from must be 'coarse' or 'fine'")

    def net(self, which: str) -> Field:
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise InputError(f"unknown net {which!r}")

    @property
    def feature_field(self) -> Field:
        return self.net(self.feature_from)

    @property
    def feature_dim(self) -> int:
        return self.feature_field.config.feature_dim

    def point_features(self, x: np.ndarray) -> np.ndarray:
        """Semantic descriptor f(x) at world points (N, 3); view-independent."""
        out = self.feature_field.forward(np.atleast_2d(x), want_color=False,
                                         want_feature=True)
        return out.feature

    def point_density(self, x: np.ndarray, net: str = "fine") -> np.ndarray:
        out = self.net(net).forward(np.atleast_2d(x), want_color=False)
        return out.sigma
