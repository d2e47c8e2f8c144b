"""Training-pair generation, simplification trajectories and trajectory-guided
registration.

A trajectory is ``[I_0, I_1, ..., I_n]`` with ``I_k = simplify(net_k, I_{k-1})``.
Guided registration walks the chain ``M_0 .. M_n, F_n .. F_0`` (moving then
fixed trajectory, reversed), registers each neighbouring pair, and composes
the ``2n + 1`` fields into one map pulling the moving image into fixed space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .demons import DemonsParams, demons_register, gaussian_smooth_array
from .errors import EmptyLabelError, GridMismatchError, OpenMeshError
from .field import DeformationField, compose_all, warp
from .mesh import (SmoothingParams, enclosed_volume, inside_mask, is_closed, laplacian_smooth,
                   marching_cubes, rescale_to_volume)
from .msnet import TrainConfig, simplify_volume, train, training_patches
from .volume import LabelVolume, Volume3, check_same_grid

__all__ = [
    "LevelParams",
    "level_schedule",
    "Trajectory",
    "GuidedResult",
    "TrainingPair",
    "simplify_labels",
    "tissue_indicator",
    "make_training_pair",
    "ground_truth_ladder",
    "train_level_nets",
    "build_trajectory",
    "guided_register",
    "DEFAULT_LEVELS",
]

DEFAULT_LEVELS = 7
INDICATOR_SIGMA = 1.0


@dataclass(frozen=True)
class LevelParams:
    """Mesh smoothing used to produce the level-``k`` simple image."""

    level: int
    smoothing: SmoothingParams

    @classmethod
    def default(cls, level: int, step: int = 10, lam: float = 0.5) -> "LevelParams":
        """``step * level`` smoothing iterations at step factor ``lam``."""
        if level < 1:
            raise ValueError("levels are numbered from 1")
        return cls(int(level), SmoothingParams(lam=lam, iterations=step * int(level)))


def level_schedule(n: int, step: int = 10, lam: float = 0.5) -> list:
    """Levels ``1..n`` with strictly increasing smoothing."""
    if step < 1:
        raise ValueError("smoothing step must be >= 1")
    return [LevelParams.default(k, step, lam) for k in range(1, n + 1)]


def _check_schedule(levels):
    for a, b in zip(levels, levels[1:]):
        if not (b.level > a.level and b.smoothing.iterations > a.smoothing.iterations):
            raise ValueError("levels must be ordered with strictly stronger smoothing")


# ---------------------------------------------------------------------------
# ground-truth simplification

def tissue_indicator(gm: LabelVolume, wm: LabelVolume, sigma: float = INDICATOR_SIGMA) -> Volume3:
    """Soft two-surface image: 0 outside, 0.5 in GM, 1 in WM, then blurred.

    Registering these images aligns both the inner and the outer surface in
    one pass, and the blur gives the demons force a usable gradient.
    """
    check_same_grid(gm, wm)
    brain = (gm.data != 0) | (wm.data != 0)
    img = 0.5 * (brain.astype(np.float64) + (wm.data != 0))
    if sigma > 0:
        img = gaussian_smooth_array(img, sigma)
    return Volume3(img, gm.spacing, gm.origin)


def _smoothed_surface_mask(labels: LabelVolume, smoothing: SmoothingParams) -> np.ndarray:
    mesh = marching_cubes(labels, 1)
    if mesh.is_empty:
        raise EmptyLabelError("tissue label is empty")
    if not is_closed(mesh):
        raise OpenMeshError("extracted surface is not closed")
    target = enclosed_volume(mesh)
    smooth = rescale_to_volume(laplacian_smooth(mesh, smoothing), target)
    return inside_mask(smooth, labels.dims)


def simplify_labels(gm: LabelVolume, wm: LabelVolume, smoothing: SmoothingParams):
    """Smooth the inner (WM) and outer (GM+WM) surfaces, restore their
    enclosed volumes, and rebuild ``(gm, wm)`` label volumes from them.

    WM is everything inside the smoothed inner surface, GM what lies inside
    the outer surface but not in WM.
    """
    check_same_grid(gm, wm)
    wm_mask = wm.data != 0
    brain = (gm.data != 0) | wm_mask
    if not wm_mask.any() or not (brain & ~wm_mask).any():
        raise EmptyLabelError("both GM and WM must be nonempty")
    inner = _smoothed_surface_mask(wm.with_data(wm_mask.astype(np.int32)), smoothing)
    outer = _smoothed_surface_mask(gm.with_data(brain.astype(np.int32)), smoothing)
    new_wm = inner
    new_gm = outer & ~inner
    return gm.with_data(new_gm.astype(np.int32)), wm.with_data(new_wm.astype(np.int32))


@dataclass
class TrainingPair:
    """A complex image, its simplified counterpart and how it was made."""

    complex: Volume3
    simple: Volume3
    gm: LabelVolume
    wm: LabelVolume
    field: DeformationField


def _training_pair(complex_vol, gm, wm, lp: LevelParams, dp: DemonsParams | None) -> TrainingPair:
    check_same_grid(complex_vol, gm)
    check_same_grid(complex_vol, wm)
    new_gm, new_wm = simplify_labels(gm, wm, lp.smoothing)
    reg = demons_register(tissue_indicator(new_gm, new_wm), tissue_indicator(gm, wm), dp)
    simple = warp(complex_vol, reg.field)
    return TrainingPair(complex_vol, simple, new_gm, new_wm, reg.field)


def make_training_pair(complex_vol: Volume3, gm: LabelVolume, wm: LabelVolume,
                       lp: LevelParams, dp: DemonsParams | None = None):
    """Ground-truth ``(complex, simple)`` pair for one smoothing level.

    The tissue surfaces are smoothed and volume-restored, the original
    tissue image is registered onto the simplified one, and the resulting
    field is applied to ``complex_vol``.
    """
    pair = _training_pair(complex_vol, gm, wm, lp, dp)
    return pair.complex, pair.simple


def ground_truth_ladder(complex_vol: Volume3, gm: LabelVolume, wm: LabelVolume,
                        levels, dp: DemonsParams | None = None) -> list:
    """``[I_0, G_1, ..., G_n]``: the original and its level-k simple images."""
    levels = list(levels)
    _check_schedule(levels)
    out = [complex_vol]
    for lp in levels:
        out.append(make_training_pair(complex_vol, gm, wm, lp, dp)[1])
    return out


def train_level_nets(ladders, make_net, config: TrainConfig, masks=None, log=None,
                     warm_start: bool = False) -> tuple:
    """Train one net per level on ``(G_{k-1}, G_k)`` pairs.

    ``ladders`` holds one :func:`ground_truth_ladder` per training subject;
    ``make_net(k)`` returns the untrained net for level ``k``. With
    ``warm_start`` only level 1 starts from ``make_net(1)``; every later
    level starts from a copy of the net trained for the level before, since
    consecutive levels learn the same kind of increment. Patch seeds are
    derived from ``config.seed``, the level and the subject index.
    Returns ``(nets, histories)``.
    """
    ladders = [list(l) for l in ladders]
    if not ladders:
        raise ValueError("no training subjects")
    n = len(ladders[0]) - 1
    if any(len(l) != n + 1 for l in ladders):
        raise ValueError("all ladders need the same number of levels")
    nets, histories = [], []
    for k in range(1, n + 1):
        pairs = []
        for i, ladder in enumerate(ladders):
            mask = masks[i] if masks is not None else None
            seed = config.seed * 1_000_003 + k * 1009 + i
            pairs += training_patches(ladder[k - 1], ladder[k], mask,
                                      config.patches_per_pair, seed, config.patch_size)
        level_cfg = TrainConfig.from_mapping({"seed": config.seed + k}, base=config)
        hook = (lambda e, loss, k=k: log(k, e, loss)) if log is not None else None
        start = nets[-1].copy() if warm_start and nets else make_net(k)
        net, hist = train(start, pairs, level_cfg, log=hook)
        nets.append(net)
        histories.append(hist)
    return nets, histories


# ---------------------------------------------------------------------------
# trajectories and guided registration

@dataclass
class Trajectory:
    """``images[0]`` is the input; ``images[k]`` is the level-k simplification."""

    images: list

    def __len__(self):
        return len(self.images)

    def __getitem__(self, k):
        return self.images[k]

    @property
    def n_levels(self) -> int:
        return len(self.images) - 1


def build_trajectory(vol: Volume3, nets) -> Trajectory:
    """Apply the nets in sequence, each to the previous output."""
    images = [vol]
    for net in nets:
        images.append(simplify_volume(net, images[-1]))
    return Trajectory(images)


@dataclass
class GuidedResult:
    """Final field, its ``2n + 1`` factors, per-step traces and the warped image.

    ``fields[i]`` registers chain image ``i`` (moving) onto chain image
    ``i + 1`` (fixed); ``field == compose_all(fields)``.
    """

    field: DeformationField
    fields: list
    traces: list
    warped: Volume3
    fixed_trajectory: Trajectory | None = None
    moving_trajectory: Trajectory | None = None
    final_mse: list = field(default_factory=list)


def guided_register(fixed: Volume3, moving: Volume3, nets, dp: DemonsParams | None = None,
                    fixed_trajectory: Trajectory | None = None,
                    moving_trajectory: Trajectory | None = None) -> GuidedResult:
    """Register ``moving`` onto ``fixed`` through their simplification trajectories.

    The chain is ``M_0, ..., M_n, F_n, ..., F_0``. Step ``i`` registers chain
    image ``i - 1`` onto chain image ``i``, so its field maps positions in
    image ``i`` to image ``i - 1``; chaining from ``F_0`` back to ``M_0``
    gives ``phi = phi_1 o phi_2 o ... o phi_{2n+1}``. Only ``phi`` is used to
    resample the moving image. With no nets this is one plain registration.
    """
    check_same_grid(fixed, moving)
    nets = list(nets)
    ft = fixed_trajectory or build_trajectory(fixed, nets)
    mt = moving_trajectory or build_trajectory(moving, nets)
    if ft.n_levels != len(nets) or mt.n_levels != len(nets):
        raise GridMismatchError("trajectory length does not match the net sequence")
    chain = list(mt.images) + list(reversed(ft.images))
    fields, traces, mse = [], [], []
    for earlier, later in zip(chain[:-1], chain[1:]):
        res = demons_register(later, earlier, dp)
        fields.append(res.field)
        traces.append(res.traces)
        mse.append(res.final_mse)
    phi = compose_all(fields)
    return GuidedResult(phi, fields, traces, warp(moving, phi), ft, mt, mse)
