"""Displacement and velocity fields.

A :class:`DeformationField` stores a displacement ``u`` per voxel (in voxel
units); the map it represents is ``phi(x) = x + u(x)``. Fields are applied by
pull-back: ``warp(vol, phi)(x) = vol(phi(x))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridMismatchError, GridTooSmallError, NonFiniteDataError
from .volume import (
    LabelVolume,
    Volume3,
    check_same_grid,
    interpolate,
    read_volume,
    voxel_grid,
    write_volume,
)

__all__ = [
    "DeformationField",
    "VelocityField",
    "identity_field",
    "warp",
    "compose",
    "compose_all",
    "exponentiate",
    "squaring_steps",
    "jacobian_determinant",
    "interior_mask",
    "write_field",
    "read_field",
    "MAX_SQUARINGS",
]

MAX_SQUARINGS = 10
COMPONENT_SUFFIXES = ("_ux", "_uy", "_uz")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel displacement vectors, ``data`` of shape ``(nx, ny, nz, 3)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 4 or arr.shape[3] != 3 or min(arr.shape[:3]) < 1:
            raise ValueError(f"field data must have shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteDataError("field contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape[:3])

    def with_data(self, data):
        return type(self)(data, self.spacing, self.origin)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data ** 2, axis=-1))

    def max_displacement(self) -> float:
        return float(self.magnitude().max())


class VelocityField(DeformationField):
    """Stationary velocity, same layout as a displacement field."""


def identity_field(like) -> DeformationField:
    """Zero displacement on the grid of ``like`` (a volume or a field)."""
    return DeformationField(np.zeros(tuple(like.dims) + (3,)), like.spacing, like.origin)


def _check(a, b):
    if tuple(a.dims) != tuple(b.dims):
        raise GridMismatchError(f"grid dims differ: {a.dims} vs {b.dims}")
    check_same_grid(a, b)


def warp(vol, phi: DeformationField, interp: str = "trilinear", zero_fill: bool = False):
    """Resample ``vol`` through ``phi``: ``out(x) = vol(x + u(x))``.

    Label volumes require ``interp="nearest"``. Points mapped outside the grid
    are clamped to the edge unless ``zero_fill`` is set.
    """
    _check(vol, phi)
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if isinstance(vol, LabelVolume) and interp != "nearest":
        raise ValueError("label volumes must be warped with nearest interpolation")
    coords = voxel_grid(vol.dims) + phi.data
    order = 1 if interp == "trilinear" else 0
    out = interpolate(vol.data, coords, order=order, zero_fill=zero_fill)
    return vol.with_data(out)


def _compose_arrays(u_outer: np.ndarray, u_inner: np.ndarray) -> np.ndarray:
    coords = voxel_grid(u_inner.shape[:3]) + u_inner
    return u_inner + interpolate(u_outer, coords, order=1)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """``outer o inner``: displacement ``u_in(x) + u_out(x + u_in(x))``.

    ``u_outer`` is sampled trilinearly with edge clamping.
    """
    _check(outer, inner)
    return DeformationField(_compose_arrays(outer.data, inner.data), inner.spacing, inner.origin)


def compose_all(fields) -> DeformationField:
    """Fold ``phi_1 o phi_2 o ... o phi_k`` left to right.

    ``compose_all([a, b, c])`` is ``compose(compose(a, b), c)``.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one field")
    out = fields[0]
    for f in fields[1:]:
        out = compose(out, f)
    return out


def squaring_steps(v: np.ndarray) -> int:
    """Smallest N with max |v| / 2**N <= 0.5 voxel, capped at MAX_SQUARINGS."""
    vmax = float(np.sqrt(np.max(np.sum(v ** 2, axis=-1)))) if v.size else 0.0
    n = 0
    while vmax / 2.0 ** n > 0.5 and n < MAX_SQUARINGS:
        n += 1
    return n


def _exp_array(v: np.ndarray) -> np.ndarray:
    n = squaring_steps(v)
    u = v / 2.0 ** n
    for _ in range(n):
        u = _compose_arrays(u, u)
    return u


def exponentiate(v: VelocityField) -> DeformationField:
    """Flow of a stationary velocity for unit time, by scaling and squaring."""
    return DeformationField(_exp_array(v.data), v.spacing, v.origin)


def jacobian_determinant(phi: DeformationField) -> Volume3:
    """Determinant of the Jacobian of ``x -> x + u(x)`` at every voxel.

    Central differences in the interior and one-sided differences on the
    faces. Every axis needs at least 3 voxels.
    """
    if min(phi.dims) < 3:
        raise GridTooSmallError(f"jacobian needs >= 3 voxels per axis, got {phi.dims}")
    return Volume3(_jacobian_det_array(phi.data), phi.spacing, phi.origin)


def _jacobian_det_array(u: np.ndarray) -> np.ndarray:
    # J[..., i, j] = d phi_i / d x_j
    J = np.empty(u.shape[:3] + (3, 3))
    for i in range(3):
        grads = np.gradient(u[..., i], edge_order=1)
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    return (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )


def interior_mask(dims, margin: int = 1) -> np.ndarray:
    """Boolean mask of voxels at least ``margin`` voxels away from every face."""
    m = np.zeros(tuple(dims), dtype=bool)
    sl = tuple(slice(margin, n - margin) for n in dims)
    m[sl] = True
    return m


def _component_paths(path) -> list:
    path = Path(path)
    return [path.with_name(path.stem + s + path.suffix) for s in COMPONENT_SUFFIXES]


def write_field(phi: DeformationField, path) -> list:
    """Write ``phi`` as three scalar volumes ``<stem>_ux``, ``_uy``, ``_uz``.

    The extension of ``path`` picks the volume format. Returns the paths.
    """
    paths = _component_paths(path)
    for k, p in enumerate(paths):
        write_volume(Volume3(phi.data[..., k], phi.spacing, phi.origin), p)
    return paths


def read_field(path, cls=DeformationField) -> DeformationField:
    comps = [read_volume(p) for p in _component_paths(path)]
    for c in comps[1:]:
        check_same_grid(comps[0], c)
    data = np.stack([c.data for c in comps], axis=-1)
    return cls(data, comps[0].spacing, comps[0].origin)
