"""Diffeomorphic demons registration of two scalar volumes on the same grid.

Each iteration computes the demons force from the fixed-image gradient,
smooths it (fluid-like regularisation), caps its length, exponentiates it and
composes it into the current field, then smooths the field itself
(diffusion-like regularisation). A coarse-to-fine pyramid with a factor of 2
per level wraps the loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, NonFiniteDataError
from .field import DeformationField, VelocityField, _compose_arrays, _exp_array
from .volume import Volume3, check_same_grid, interpolate, voxel_grid

__all__ = [
    "DemonsParams",
    "RegistrationResult",
    "demons_force",
    "gaussian_smooth_field",
    "gaussian_smooth_array",
    "demons_register",
    "normalize_pair",
]

FORCE_EPS = 1e-12


@dataclass
class DemonsParams:
    """Demons settings. ``iterations`` is ordered coarse to fine."""

    pyramid_levels: int = 3
    iterations: tuple = (30, 30, 20)
    sigma_update: float = 1.0
    sigma_field: float = 1.5
    max_step: float = 2.0
    kappa: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.iterations, int):
            self.iterations = (self.iterations,) * int(self.pyramid_levels)
        self.iterations = tuple(int(i) for i in self.iterations)
        self.pyramid_levels = int(self.pyramid_levels)
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if len(self.iterations) != self.pyramid_levels:
            raise ConfigError(
                f"need one iteration count per level: {self.pyramid_levels} levels, "
                f"got {list(self.iterations)}")
        if any(i < 1 for i in self.iterations):
            raise ConfigError("iteration counts must be positive")
        for name in ("sigma_update", "sigma_field", "max_step", "kappa"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: "DemonsParams | None" = None) -> "DemonsParams":
        """Build params from string or typed values, on top of ``base``."""
        kw = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        known = {f.name for f in fields(cls)}
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown demons key {key!r}")
            kw[key] = _coerce(key, raw)
        if "pyramid_levels" in values and "iterations" not in values:
            its = kw.get("iterations", cls.iterations)
            if len(its) != int(kw["pyramid_levels"]):
                kw["iterations"] = (its[-1],) * int(kw["pyramid_levels"])
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "DemonsParams":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def load(cls, path) -> "DemonsParams":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(key, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if key == "iterations":
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if key == "pyramid_levels":
            return int(raw)
        if key == "normalize":
            return raw.lower() in ("1", "true", "yes", "on")
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


@dataclass
class RegistrationResult:
    """Outcome of :func:`demons_register`.

    ``field`` pulls the moving image into fixed space. ``traces`` holds the
    mean squared intensity difference before every iteration, one list per
    pyramid level (coarse to fine).
    """

    field: DeformationField
    final_mse: float
    traces: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# smoothing

def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(math.floor(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth_array(a: np.ndarray, sigma: float, axes=(0, 1, 2)) -> np.ndarray:
    """Separable Gaussian blur truncated at 3 sigma.

    Near the faces the truncated kernel is renormalised over the in-grid
    taps, so constants are preserved exactly up to rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    if sigma <= 0:
        return a
    w = _gauss_kernel(sigma)
    out = a
    for ax in axes:
        n = a.shape[ax]
        num = correlate1d(out, w, axis=ax, mode="constant", cval=0.0)
        den = correlate1d(np.ones(n), w, mode="constant", cval=0.0)
        shape = [1] * a.ndim
        shape[ax] = n
        out = num / den.reshape(shape)
    return out


def gaussian_smooth_field(v, sigma: float):
    """Blur each component of a velocity or displacement field."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return v
    return v.with_data(gaussian_smooth_array(v.data, sigma))


# ---------------------------------------------------------------------------
# force

def _force_array(f: np.ndarray, m: np.ndarray, kappa: float, grad_f=None) -> np.ndarray:
    if grad_f is None:
        grad_f = np.stack(np.gradient(f), axis=-1)
    diff = m - f
    den = np.sum(grad_f ** 2, axis=-1) + diff ** 2 / kappa ** 2
    scale = np.zeros_like(den)
    ok = den >= FORCE_EPS
    scale[ok] = diff[ok] / den[ok]
    return grad_f * scale[..., None]


def demons_force(fixed: Volume3, warped_moving: Volume3, kappa: float = 1.0) -> VelocityField:
    """Thirion demons force ``(m - f) grad f / (|grad f|^2 + (m - f)^2 / kappa^2)``.

    ``grad f`` uses central differences (one-sided on the faces). Voxels where
    the denominator is below 1e-12 get zero force. The returned vector points
    the way a push-forward displacement would move; under the pull-back
    convention used by :func:`demons_register` the correction is its negative.
    """
    check_same_grid(fixed, warped_moving)
    return VelocityField(_force_array(fixed.data, warped_moving.data, kappa),
                         fixed.spacing, fixed.origin)


# ---------------------------------------------------------------------------
# registration

def normalize_pair(fixed: np.ndarray, moving: np.ndarray):
    """Map both arrays with the min/max of ``fixed`` onto [0, 1]."""
    lo, hi = float(fixed.min()), float(fixed.max())
    if hi - lo <= 0:
        return fixed - lo, moving - lo
    s = 1.0 / (hi - lo)
    return (fixed - lo) * s, (moving - lo) * s


def _downsample(a: np.ndarray) -> np.ndarray:
    return gaussian_smooth_array(a, 1.0)[::2, ::2, ::2]


def _upsample_field(u: np.ndarray, dims) -> np.ndarray:
    coords = voxel_grid(dims) / 2.0
    return 2.0 * interpolate(u, coords, order=1)


def _pyramid_depth(dims, levels: int) -> int:
    depth = 1
    shape = np.array(dims)
    while depth < levels and np.all(np.ceil(shape / 2) >= 4):
        shape = np.ceil(shape / 2)
        depth += 1
    return depth


def _cap(update: np.ndarray, max_step: float) -> np.ndarray:
    norm = np.sqrt(np.sum(update ** 2, axis=-1))
    over = norm > max_step
    if np.any(over):
        update = update.copy()
        update[over] *= (max_step / norm[over])[:, None]
    return update


def _register_level(f, m, u, iters, p: DemonsParams, trace: list) -> np.ndarray:
    grid = voxel_grid(f.shape)
    grad_f = np.stack(np.gradient(f), axis=-1)
    for _ in range(iters):
        warped = interpolate(m, grid + u, order=1)
        trace.append(float(np.mean((warped - f) ** 2)))
        update = -_force_array(f, warped, p.kappa, grad_f)
        update = gaussian_smooth_array(update, p.sigma_update)
        update = _cap(update, p.max_step)
        u = _compose_arrays(u, _exp_array(update))
        u = gaussian_smooth_array(u, p.sigma_field)
    return u


def demons_register(fixed: Volume3, moving: Volume3,
                    params: DemonsParams | None = None) -> RegistrationResult:
    """Register ``moving`` onto ``fixed``.

    Returns a field ``phi`` with ``warp(moving, phi) ~ fixed``. If the grid
    is too small for the requested pyramid, the coarsest levels (and their
    iteration counts) are dropped.
    """
    p = params or DemonsParams()
    check_same_grid(fixed, moving)
    f = fixed.data
    m = moving.data
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
        raise NonFiniteDataError("registration inputs must be finite")
    if p.normalize:
        f, m = normalize_pair(f, m)
    depth = _pyramid_depth(f.shape, p.pyramid_levels)
    iters = p.iterations[p.pyramid_levels - depth:]
    fs, ms = [f], [m]
    for _ in range(depth - 1):
        fs.append(_downsample(fs[-1]))
        ms.append(_downsample(ms[-1]))
    u = None
    traces = []
    for level in range(depth - 1, -1, -1):
        shape = fs[level].shape
        if u is None:
            u = np.zeros(shape + (3,))
        else:
            u = _upsample_field(u, shape)
        trace = []
        u = _register_level(fs[level], ms[level], u, iters[depth - 1 - level], p, trace)
        traces.append(trace)
    warped = interpolate(m, voxel_grid(f.shape) + u, order=1)
    final = float(np.mean((warped - f) ** 2))
    return RegistrationResult(DeformationField(u, fixed.spacing, fixed.origin), final, traces)
