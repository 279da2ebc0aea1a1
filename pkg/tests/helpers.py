"""Shared test scaffolding: analytic fields (closed-form scenes that need no
training) and small deterministic builders."""

from types import SimpleNamespace

import numpy as np

from featfield.field import FieldOutput
from featfield.scene import SceneModel


class AnalyticField:
    """Closed-form stand-in for a trained Field.

    sigma_fn(x)->(N,), color_fn(x,d)->(N,3), feature_fn(x)->(N,D) define the
    medium exactly, so renders have analytic ground truth.
    """

    def __init__(self, sigma_fn, color_fn=None, feature_fn=None, feature_dim=0):
        self.sigma_fn = sigma_fn
        self.color_fn = color_fn
        self.feature_fn = feature_fn
        self.config = SimpleNamespace(feature_dim=feature_dim)

    def forward(self, x, d=None, want_color=True, want_feature=False, **_):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma = np.asarray(self.sigma_fn(x), dtype=np.float64)
        color = None
        if want_color and self.color_fn is not None:
            color = np.asarray(self.color_fn(x, d), dtype=np.float64)
        feature = None
        if want_feature:
            feature = np.asarray(self.feature_fn(x), dtype=np.float64)
        return FieldOutput(sigma=sigma, sigma_raw=sigma, color=color,
                           feature=feature)


def solid_spheres_field(spheres, *, density=60.0, feature_dim=0,
                        background_feature=None):
    """Union of solid spheres: [(center, radius, color, feature), ...]."""

    def sigma_fn(x):
        s = np.zeros(len(x))
        for center, radius, _, _ in spheres:
            inside = np.linalg.norm(x - np.asarray(center), axis=1) < radius
            s = np.where(inside, density, s)
        return s

    def color_fn(x, d):
        c = np.zeros((len(x), 3))
        for center, radius, color, _ in spheres:
            inside = np.linalg.norm(x - np.asarray(center), axis=1) < radius
            c[inside] = np.asarray(color)
        return c

    def feature_fn(x):
        f = np.zeros((len(x), feature_dim))
        if background_feature is not None:
            f[:] = np.asarray(background_feature)
        for center, radius, _, feat in spheres:
            inside = np.linalg.norm(x - np.asarray(center), axis=1) < radius
            f[inside] = np.asarray(feat)
        return f

    return AnalyticField(sigma_fn, color_fn,
                         feature_fn if feature_dim else None,
                         feature_dim=feature_dim)


def analytic_scene(spheres, *, near=2.0, far=6.5, density=60.0,
                   feature_dim=0, background_feature=None) -> SceneModel:
    field = solid_spheres_field(spheres, density=density,
                                feature_dim=feature_dim,
                                background_feature=background_feature)
    return SceneModel(coarse=field, fine=field, near=near, far=far,
                      feature_from="fine")


class ConstantRng:
    """Degenerate random source: every draw returns the same value."""

    def __init__(self, value):
        self.value = value

    def random(self, shape=None):
        if shape is None:
            return self.value
        return np.full(shape, self.value)
