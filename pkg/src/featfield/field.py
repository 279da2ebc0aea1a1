"""The trainable neural field: sinusoidal encoding, a shared ReLU trunk with
density / color / feature heads, and hand-written exact backpropagation.

Parameters live in one flat vector (with named per-layer views) so the
optimizer and checkpoints treat a field as a single array. Forward passes can
retain their intermediates; `backward` contracts upstream gradients on
(sigma, color, feature) against that cache and accumulates into the gradient
buffer of the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .errors import InputError, StructureError
from .geometry import as_rng

PARAM_GROUPS = ("trunk", "density", "color", "feature")
RADIANCE_GROUPS = ("trunk", "density", "color")


def positional_encoding(x: np.ndarray, length: int) -> np.ndarray:
    """Lift each component to [x, sin(2^l pi x), cos(2^l pi x)] for l < length.

    Output dimension is n * (1 + 2 * length), ordered as the raw components
    followed by frequency-major sin/cos blocks.
    """
    if length < 0:
        raise InputError("encoding length must be nonnegative")
    x = np.asarray(x)
    if length == 0:
        return x.copy()
    freqs = (2.0 ** np.arange(length)) * np.pi
    ang = x[..., None, :] * freqs.astype(x.dtype)[:, None]  # (..., L, n)
    parts = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., L, 2n)
    flat = parts.reshape(*x.shape[:-1], 2 * length * x.shape[-1])
    return np.concatenate([x, flat], axis=-1)


def pe_dim(n: int, length: int) -> int:
    return n * (1 + 2 * length)


@dataclass
class FieldConfig:
    """Architecture of one field network."""

    trunk_layers: int = 8
    trunk_width: int = 256
    pe_len_pos: int = 10
    pe_len_dir: int = 4
    skip_at: int = 5
    feature_dim: int = 16
    head_layers_color: int = 3
    head_layers_feature: int = 3
    feature_mode: str = "branch"        # "branch" | "independent"
    independent_pe: bool = True
    independent_layers: int = 4
    independent_width: int = 0          # 0 -> trunk_width
    density_bias_init: float = 0.0      # >0 starts as thin fog; stabilizes
                                        # short schedules against collapse

    def __post_init__(self):
        if self.trunk_layers < 1:
            raise InputError("trunk needs at least one layer")
        if self.feature_dim < 1:
            raise InputError("feature dimension must be >= 1")
        if self.skip_at >= self.trunk_layers:
            raise InputError("skip index must precede the last trunk layer")
        if self.feature_mode not in ("branch", "independent"):
            raise InputError(f"unknown feature mode {self.feature_mode!r}")
        if self.head_layers_color < 2 or self.head_layers_feature < 1:
            raise InputError("color head needs >= 2 layers, feature head >= 1")
        if self.independent_layers < 1:
            raise InputError("independent feature net needs >= 1 layer")

    @classmethod
    def paper_scale(cls, feature_dim=512) -> "FieldConfig":
        return cls(trunk_layers=8, trunk_width=256, pe_len_pos=10, pe_len_dir=4,
                   skip_at=5, feature_dim=feature_dim)

    @classmethod
    def desk_scale(cls, feature_dim=16, **overrides) -> "FieldConfig":
        kw = dict(trunk_layers=4, trunk_width=64, pe_len_pos=8, pe_len_dir=2,
                  skip_at=2, feature_dim=feature_dim)
        kw.update(overrides)
        return cls(**kw)

    @property
    def head_width(self) -> int:
        return max(self.trunk_width // 2, 4)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "FieldConfig":
        return cls(**d)


def param_count(config: FieldConfig) -> int:
    return sum(fi * fo + fo for _, _, fi, fo in _layer_specs(config))


def _layer_specs(config: FieldConfig):
    """Yield (name, group, fan_in, fan_out) for every linear layer."""
    P = pe_dim(3, config.pe_len_pos)
    Q = pe_dim(3, config.pe_len_dir)
    W = config.trunk_width
    Hw = config.head_width
    specs = []
    inp = P
    for i in range(config.trunk_layers):
        fan_in = inp + (P if i == config.skip_at and i > 0 else 0)
        specs.append((f"trunk.{i}", "trunk", fan_in, W))
        inp = W
    specs.append(("density.out", "density", W, 1))
    # Color head: linear bottleneck, hidden ReLU layers seeing the encoded
    # direction, then a linear RGB layer squashed by a sigmoid.
    specs.append(("color.0", "color", W, W))
    inp = W + Q
    for j in range(1, config.head_layers_color - 1):
        specs.append((f"color.{j}", "color", inp, Hw))
        inp = Hw
    specs.append((f"color.{config.head_layers_color - 1}", "color", inp, 3))
    if config.feature_mode == "branch":
        inp = W
        for j in range(config.head_layers_feature - 1):
            specs.append((f"feature.{j}", "feature", inp, Hw))
            inp = Hw
        specs.append((f"feature.{config.head_layers_feature - 1}", "feature",
                      inp, config.feature_dim))
    else:
        fin = pe_dim(3, config.pe_len_pos) if config.independent_pe else 3
        width = config.independent_width or config.trunk_width
        inp = fin
        n = config.independent_layers
        for i in range(n):
            skip = (i == 2 and i > 0 and config.independent_pe)
            fan_in = inp + (fin if skip else 0)
            fan_out = config.feature_dim if i == n - 1 else width
            specs.append((f"feature.{i}", "feature", fan_in, fan_out))
            inp = width
    return specs


class FieldParams:
    """Flat parameter vector plus a same-shape gradient buffer.

    Weights are stored (fan_in, fan_out) so the forward pass is `x @ W + b`.
    """

    def __init__(self, config: FieldConfig, dtype=np.float32, rng=None):
        self.dtype = np.dtype(dtype)
        self._density_bias_init = config.density_bias_init
        self._index = {}
        self._groups = {}
        offset = 0
        for name, group, fan_in, fan_out in _layer_specs(config):
            self._index[name + ".W"] = (offset, (fan_in, fan_out))
            self._groups[name + ".W"] = group
            offset += fan_in * fan_out
            self._index[name + ".b"] = (offset, (fan_out,))
            self._groups[name + ".b"] = group
            offset += fan_out
        self.size = offset
        self.values = np.zeros(offset, dtype=self.dtype)
        self.grads = np.zeros(offset, dtype=self.dtype)
        if rng is not None:
            self.init_kaiming(rng)

    def init_kaiming(self, rng):
        """Fan-in scaled uniform init for the ReLU stack; zero biases."""
        rng = as_rng(rng)
        for name, (offset, shape) in self._index.items():
            if name.endswith(".W"):
                bound = np.sqrt(6.0 / shape[0])
                block = rng.uniform(-bound, bound, size=shape)
                self.values[offset:offset + block.size] = \
                    block.reshape(-1).astype(self.dtype)
        off, shape = self._index["density.out.b"]
        self.values[off:off + int(np.prod(shape))] = self._density_bias_init

    def view(self, name: str, of: str = "values") -> np.ndarray:
        offset, shape = self._index[name]
        base = self.values if of == "values" else self.grads
        return base[offset:offset + int(np.prod(shape))].reshape(shape)

    def names(self):
        return list(self._index)

    def group_mask(self, groups) -> np.ndarray:
        """Boolean mask over the flat vector selecting parameter groups."""
        mask = np.zeros(self.size, dtype=bool)
        for name, (offset, shape) in self._index.items():
            if self._groups[name] in groups:
                mask[offset:offset + int(np.prod(shape))] = True
        return mask

    def zero_grads(self):
        self.grads[:] = 0

    def copy(self) -> "FieldParams":
        dup = object.__new__(FieldParams)
        dup.dtype = self.dtype
        dup._density_bias_init = self._density_bias_init
        dup._index = self._index
        dup._groups = self._groups
        dup.size = self.size
        dup.values = self.values.copy()
        dup.grads = self.grads.copy()
        return dup


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    zp = z[pos]
    out[pos] = 1.0 / (1.0 + np.exp(-zp))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class FieldOutput:
    sigma: np.ndarray                 # (N,) nonnegative
    sigma_raw: np.ndarray             # (N,) pre-activation, pre-noise
    color: np.ndarray | None = None   # (N, 3) in [0, 1]
    feature: np.ndarray | None = None  # (N, D)


@dataclass
class _Cache:
    """Everything backward() needs: per-layer inputs and ReLU masks."""

    x_enc: np.ndarray
    d_enc: np.ndarray | None = None
    trunk_in: list = dc_field(default_factory=list)
    trunk_mask: list = dc_field(default_factory=list)
    trunk_out: np.ndarray | None = None
    sigma_mask: np.ndarray | None = None
    color_in: list = dc_field(default_factory=list)
    color_mask: list = dc_field(default_factory=list)
    color: np.ndarray | None = None
    feat_in: list = dc_field(default_factory=list)
    feat_mask: list = dc_field(default_factory=list)
    feat_src: np.ndarray | None = None  # encoded input of the independent net


class Field:
    """One field network: config + parameters + forward/backward."""

    def __init__(self, config: FieldConfig, params: FieldParams | None = None,
                 *, dtype=np.float32, rng=None):
        self.config = config
        if params is None:
            params = FieldParams(config, dtype=dtype,
                                 rng=rng if rng is not None else 0)
        if params.size != param_count(config):
            raise StructureError("parameter vector does not match the config")
        self.params = params

    # ------------------------------------------------------------- forward

    def forward(self, x: np.ndarray, d: np.ndarray | None = None, *,
                want_color: bool = True, want_feature: bool = False,
                noise_rng=None, noise_scale: float = 0.0,
                want_cache: bool = False):
        """Evaluate the field at positions x (N, 3), directions d (N, 3).

        Density noise (train-time regularization) is added to the raw density
        before its ReLU. Returns FieldOutput, or (FieldOutput, cache) when
        `want_cache` is set; the cache feeds backward().
        """
        p = self.params
        cfg = self.config
        x = np.ascontiguousarray(x, dtype=p.dtype)
        if x.ndim != 2 or x.shape[1] != 3:
            raise StructureError("positions must be (N, 3)")
        if want_color and d is None:
            raise StructureError("color evaluation needs view directions")
        x_enc = positional_encoding(x, cfg.pe_len_pos)
        d_enc = None
        if want_color:
            d = np.ascontiguousarray(d, dtype=p.dtype)
            if d.shape != x.shape:
                raise StructureError("directions must match positions")
            d_enc = positional_encoding(d, cfg.pe_len_dir)
        cache = _Cache(x_enc=x_enc, d_enc=d_enc) if want_cache else None

        # Trunk
        h = x_enc
        for i in range(cfg.trunk_layers):
            inp = h
            if i == cfg.skip_at and i > 0:
                inp = np.concatenate([h, x_enc], axis=-1)
            z = inp @ p.view(f"trunk.{i}.W") + p.view(f"trunk.{i}.b")
            if cache is not None:
                cache.trunk_in.append(inp)
                cache.trunk_mask.append(z > 0)
            h = _relu(z)
        if cache is not None:
            cache.trunk_out = h

        # Density
        sigma_raw = (h @ p.view("density.out.W") + p.view("density.out.b"))[:, 0]
        pre = sigma_raw
        if noise_scale > 0.0 and noise_rng is not None:
            pre = sigma_raw + noise_scale * noise_rng.standard_normal(
                sigma_raw.shape[0]).astype(p.dtype)
        sigma = _relu(pre)
        if cache is not None:
            cache.sigma_mask = pre > 0

        # Color
        color = None
        if want_color:
            u = h @ p.view("color.0.W") + p.view("color.0.b")
            if cache is not None:
                cache.color_in.append(h)
                cache.color_mask.append(None)
            u = np.concatenate([u, d_enc], axis=-1)
            for j in range(1, cfg.head_layers_color - 1):
                z = u @ p.view(f"color.{j}.W") + p.view(f"color.{j}.b")
                if cache is not None:
                    cache.color_in.append(u)
                    cache.color_mask.append(z > 0)
                u = _relu(z)
            last = cfg.head_layers_color - 1
            z = u @ p.view(f"color.{last}.W") + p.view(f"color.{last}.b")
            if cache is not None:
                cache.color_in.append(u)
                cache.color_mask.append(None)
            color = _sigmoid(z)
            if cache is not None:
                cache.color = color

        # Feature
        feature = None
        if want_feature:
            if cfg.feature_mode == "branch":
                v = h
                for j in range(cfg.head_layers_feature - 1):
                    z = v @ p.view(f"feature.{j}.W") + p.view(f"feature.{j}.b")
                    if cache is not None:
                        cache.feat_in.append(v)
                        cache.feat_mask.append(z > 0)
                    v = _relu(z)
                last = cfg.head_layers_feature - 1
                feature = v @ p.view(f"feature.{last}.W") + p.view(f"feature.{last}.b")
                if cache is not None:
                    cache.feat_in.append(v)
                    cache.feat_mask.append(None)
            else:
                fin = positional_encoding(x, cfg.pe_len_pos) if cfg.independent_pe else x
                if cache is not None:
                    cache.feat_src = fin
                g = fin
                n = cfg.independent_layers
                for i in range(n):
                    inp = g
                    if i == 2 and i > 0 and cfg.independent_pe:
                        inp = np.concatenate([g, fin], axis=-1)
                    z = inp @ p.view(f"feature.{i}.W") + p.view(f"feature.{i}.b")
                    if i < n - 1:
                        if cache is not None:
                            cache.feat_in.append(inp)
                            cache.feat_mask.append(z > 0)
                        g = _relu(z)
                    else:
                        if cache is not None:
                            cache.feat_in.append(inp)
                            cache.feat_mask.append(None)
                        g = z
                feature = g

        out = FieldOutput(sigma=sigma, sigma_raw=sigma_raw, color=color,
                          feature=feature)
        return (out, cache) if want_cache else out

    # ------------------------------------------------------------ backward

    def backward(self, cache: _Cache, d_sigma=None, d_color=None,
                 d_feature=None, *, block_density: bool = False):
        """Accumulate parameter gradients for one cached forward pass.

        Upstream gradients may be omitted (treated as exactly zero).
        `block_density` severs the density path entirely, implementing the
        stop-gradient used when distilling features.
        """
        if cache is None or cache.trunk_out is None:
            raise StructureError("backward needs the cache from forward(want_cache=True)")
        p = self.params
        cfg = self.config
        n = cache.x_enc.shape[0]
        dh = np.zeros((n, cfg.trunk_width), dtype=p.dtype)

        if d_sigma is not None and not block_density:
            dz = (np.asarray(d_sigma, dtype=p.dtype) * cache.sigma_mask)[:, None]
            p.view("density.out.W", "grads")[...] += cache.trunk_out.T @ dz
            p.view("density.out.b", "grads")[...] += dz.sum(axis=0)
            dh += dz @ p.view("density.out.W").T

        if d_color is not None:
            if cache.color is None:
                raise StructureError("forward pass did not evaluate color")
            dz = np.asarray(d_color, dtype=p.dtype) * cache.color * (1.0 - cache.color)
            for j in range(cfg.head_layers_color - 1, -1, -1):
                inp = cache.color_in[j]
                p.view(f"color.{j}.W", "grads")[...] += inp.T @ dz
                p.view(f"color.{j}.b", "grads")[...] += dz.sum(axis=0)
                dinp = dz @ p.view(f"color.{j}.W").T
                if j == 1:
                    dinp = dinp[:, :cfg.trunk_width]  # drop the d_enc slice
                if j > 0:
                    mask = cache.color_mask[j - 1]
                    dz = dinp * mask if mask is not None else dinp
                else:
                    dh += dinp

        if d_feature is not None:
            if not cache.feat_in:
                raise StructureError("forward pass did not evaluate features")
            dz = np.asarray(d_feature, dtype=p.dtype)
            if cfg.feature_mode == "branch":
                for j in range(cfg.head_layers_feature - 1, -1, -1):
                    inp = cache.feat_in[j]
                    p.view(f"feature.{j}.W", "grads")[...] += inp.T @ dz
                    p.view(f"feature.{j}.b", "grads")[...] += dz.sum(axis=0)
                    dinp = dz @ p.view(f"feature.{j}.W").T
                    if j > 0:
                        mask = cache.feat_mask[j - 1]
                        dz = dinp * mask if mask is not None else dinp
                    else:
                        dh += dinp
            else:
                width = cfg.independent_width or cfg.trunk_width
                for i in range(cfg.independent_layers - 1, -1, -1):
                    inp = cache.feat_in[i]
                    p.view(f"feature.{i}.W", "grads")[...] += inp.T @ dz
                    p.view(f"feature.{i}.b", "grads")[...] += dz.sum(axis=0)
                    if i > 0:
                        dinp = dz @ p.view(f"feature.{i}.W").T
                        if i == 2 and cfg.independent_pe:
                            dinp = dinp[:, :width]  # drop the re-injected encoding
                        dz = dinp * cache.feat_mask[i - 1]
                # gradients stop at the encoded input: nothing joins the trunk

        # Trunk unwind from the summed head gradients.
        if dh.any():
            dz = dh * cache.trunk_mask[-1]
            for i in range(cfg.trunk_layers - 1, -1, -1):
                inp = cache.trunk_in[i]
                p.view(f"trunk.{i}.W", "grads")[...] += inp.T @ dz
                p.view(f"trunk.{i}.b", "grads")[...] += dz.sum(axis=0)
                if i > 0:
                    dinp = dz @ p.view(f"trunk.{i}.W").T
                    if i == cfg.skip_at:
                        dinp = dinp[:, :cfg.trunk_width]  # drop the x_enc slice
                    dz = dinp * cache.trunk_mask[i - 1]


def finite_difference_grad(fn, params: FieldParams, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. every parameter.

    Intended for small double-precision nets in tests; fn must re-run the
    forward pass reading `params.values`.
    """
    base = params.values.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    for i in range(params.size):
        params.values[i] = base[i] + h
        fp = fn()
        params.values[i] = base[i] - h
        fm = fn()
        params.values[i] = base[i]
        grad[i] = (fp - fm) / (2.0 * h)
    params.values[:] = base
    return grad
