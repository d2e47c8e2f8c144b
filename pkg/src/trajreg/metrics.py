"""Overlap and surface-distance scores for label volumes, plus deformation
diagnostics.

TO (target overlap) is deliberately asymmetric: it is the fraction of the
fixed (target) region covered by the warped region.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyLabelError
from .field import DeformationField, _jacobian_det_array, interior_mask
from .volume import LabelVolume, check_same_grid

__all__ = [
    "dsc",
    "target_overlap",
    "assd",
    "boundary_mask",
    "roi_tissue_split",
    "jacobian_stats",
    "MetricReport",
    "LabelScores",
    "evaluate",
]


def _pair(a: LabelVolume, b: LabelVolume, label: int):
    check_same_grid(a, b)
    return a.data == label, b.data == label


def dsc(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Dice coefficient of ``label``; 1.0 when both sets are empty."""
    ma, mb = _pair(a, b, label)
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)


def target_overlap(warped: LabelVolume, fixed: LabelVolume, label: int) -> float:
    """``|warped & fixed| / |fixed|`` for ``label``.

    Both empty gives 1.0. An empty fixed set with a nonempty warped set has
    no meaningful value and returns NaN; report builders list such labels as
    excluded instead of averaging them.
    """
    mw, mf = _pair(warped, fixed, label)
    nf = int(mf.sum())
    if nf == 0:
        return 1.0 if not mw.any() else math.nan
    return int(np.count_nonzero(mw & mf)) / nf


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Set voxels with at least one unset 6-neighbour (outside the grid counts as unset)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    interior = (p[2:, 1:-1, 1:-1] & p[:-2, 1:-1, 1:-1]
                & p[1:-1, 2:, 1:-1] & p[1:-1, :-2, 1:-1]
                & p[1:-1, 1:-1, 2:] & p[1:-1, 1:-1, :-2])
    return m & ~interior


def assd(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Average symmetric surface distance in mm.

    Surfaces are the boundary voxel centres of each set; each boundary voxel
    contributes its Euclidean distance to the nearest boundary voxel of the
    other set, and the mean runs over both boundaries together.
    """
    ma, mb = _pair(a, b, label)
    if not ma.any() or not mb.any():
        raise EmptyLabelError(f"ASSD of label {label} needs two nonempty sets")
    sp = np.asarray(a.spacing)
    pa = np.argwhere(boundary_mask(ma)) * sp
    pb = np.argwhere(boundary_mask(mb)) * sp
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    # exactly rounded sum, so the result does not depend on point order
    return math.fsum(np.concatenate([da, db])) / (len(da) + len(db))


def roi_tissue_split(roi: LabelVolume, gm: LabelVolume, wm: LabelVolume):
    """Split every ROI into its grey-matter and white-matter parts.

    ``gm``/``wm`` are read as masks (nonzero = tissue). ROI ids are kept.
    """
    check_same_grid(roi, gm)
    check_same_grid(roi, wm)
    r = roi.data
    in_gm = np.where(gm.data != 0, r, 0)
    in_wm = np.where(wm.data != 0, r, 0)
    return roi.with_data(in_gm), roi.with_data(in_wm)


def jacobian_stats(phi: DeformationField, margin: int = 1):
    """(minimum determinant, fraction of determinants <= 0) over interior voxels."""
    det = _jacobian_det_array(phi.data)
    inner = det[interior_mask(phi.dims, margin)]
    if inner.size == 0:
        inner = det.ravel()
    return float(inner.min()), float(np.count_nonzero(inner <= 0) / inner.size)


# ---------------------------------------------------------------------------
# reports

@dataclass
class LabelScores:
    label: int
    dsc: float
    to: float | None
    assd_mm: float | None
    n_warped: int
    n_fixed: int


@dataclass
class MetricReport:
    """Per-label scores plus optional Jacobian statistics.

    ``excluded`` lists ``(label, reason)`` pairs that are reported but left
    out of the averages.
    """

    scores: list = field(default_factory=list)
    jacobian_min: float | None = None
    jacobian_nonpositive_fraction: float | None = None
    labels_warped: list = field(default_factory=list)
    labels_fixed: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def score(self, label: int) -> LabelScores:
        for s in self.scores:
            if s.label == label:
                return s
        raise KeyError(label)

    def means(self) -> dict:
        skip = {lab for lab, _ in self.excluded}
        rows = [s for s in self.scores if s.label not in skip]
        out = {}
        for key in ("dsc", "to", "assd_mm"):
            vals = [getattr(s, key) for s in rows if getattr(s, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_table(self) -> str:
        """Tab-separated table, one row per label, then a mean row."""
        lines = ["label\tDSC\tTO\tASSD_mm\tn_warped\tn_fixed"]
        for s in self.scores:
            lines.append("\t".join([
                str(s.label), _fmt(s.dsc), _fmt(s.to), _fmt(s.assd_mm),
                str(s.n_warped), str(s.n_fixed)]))
        m = self.means()
        lines.append("\t".join(["mean", _fmt(m["dsc"]), _fmt(m["to"]), _fmt(m["assd_mm"]), "", ""]))
        if self.jacobian_min is not None:
            lines.append(f"# jacobian_min\t{_fmt(self.jacobian_min)}")
            lines.append(f"# jacobian_nonpositive_fraction\t{_fmt(self.jacobian_nonpositive_fraction)}")
        for lab, why in self.excluded:
            lines.append(f"# excluded\t{lab}\t{why}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["excluded"] = [list(e) for e in self.excluded]
        d["means"] = self.means()
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d.pop("means", None)
        d["scores"] = [LabelScores(**s) for s in d["scores"]]
        d["excluded"] = [tuple(e) for e in d["excluded"]]
        return cls(**d)

    def write(self, path) -> list:
        """Write ``<path>`` (table) and ``<path stem>.json``; return both paths."""
        path = Path(path)
        json_path = path.with_suffix(".json")
        path.write_text(self.to_table())
        json_path.write_text(self.to_json())
        return [path, json_path]


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float) and math.isnan(x):
        return "NaN"
    return f"{x:.6f}"


def evaluate(warped: LabelVolume, fixed: LabelVolume, labels=None,
             phi: DeformationField | None = None) -> MetricReport:
    """Score ``warped`` against ``fixed`` for every nonzero label (or ``labels``)."""
    check_same_grid(warped, fixed)
    lw = [l for l in warped.labels() if l != 0]
    lf = [l for l in fixed.labels() if l != 0]
    if labels is None:
        labels = sorted(set(lw) | set(lf))
    report = MetricReport(labels_warped=lw, labels_fixed=lf)
    for lab in labels:
        nw = int(np.count_nonzero(warped.data == lab))
        nf = int(np.count_nonzero(fixed.data == lab))
        to = target_overlap(warped, fixed, lab)
        if math.isnan(to):
            to = None
            report.excluded.append((int(lab), "empty in fixed"))
        elif nf == 0:
            report.excluded.append((int(lab), "empty in both"))
        dist = assd(warped, fixed, lab) if nw and nf else None
        report.scores.append(LabelScores(int(lab), dsc(warped, fixed, lab), to, dist, nw, nf))
    if phi is not None:
        report.jacobian_min, report.jacobian_nonpositive_fraction = jacobian_stats(phi)
    return report
