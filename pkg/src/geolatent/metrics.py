"""Pose evaluation metrics: MPJPE and its scale- and Procrustes-aligned
variants, all pelvis-centered, in mm.

The alignment groups nest (translation ⊂ translation+scale ⊂ full
similarity), so per sample ``p_mpjpe <= n_mpjpe <= mpjpe``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


def center_at_pelvis(pose: np.ndarray, root_index: int = 0) -> np.ndarray:
    """Translate so the root joint sits at the origin."""
    pose = np.asarray(pose, dtype=np.float64)
    return pose - pose[root_index]


def mpjpe(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> float:
    """Mean per-joint Euclidean distance after pelvis centering, mm."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("joint count mismatch")
    p = center_at_pelvis(pred, root_index)
    q = center_at_pelvis(gt, root_index)
    return float(np.mean(np.linalg.norm(p - q, axis=-1)))


def _mean_norm(p: np.ndarray, q: np.ndarray) -> float:
    d = p - q
    return float(np.sqrt(np.einsum("...i,...i->...", d, d)).mean())


def _best_scale(p: np.ndarray, q: np.ndarray) -> float:
    """Scale minimizing the mean per-joint distance ``mean ||s p - q||``.

    The objective is convex in s; golden-section search bracketed around
    the squared-error closed form <p, q> / <p, p>.  Each evaluation uses
    the precomputed per-joint quadratic ``||s p_k - q_k||^2``.
    """
    s0 = float(np.sum(p * q)) / float(np.sum(p * p))
    lo, hi = 0.0, max(4.0 * abs(s0), 1.0)
    pp = np.einsum("...i,...i->...", p, p).ravel()
    pq = np.einsum("...i,...i->...", p, q).ravel()
    qq = np.einsum("...i,...i->...", q, q).ravel()

    def f(s):
        return np.sqrt(np.maximum(s * s * pp - 2.0 * s * pq + qq, 0.0)).sum()

    # the squared-error optimum is exact whenever an exact fit exists
    if s0 > 0.0 and f(s0) < 1e-9:
        return s0

    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    # convexity makes the objective error quadratic in the bracket width,
    # so 30 golden steps put it far below metric tolerance
    for _ in range(30):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def n_mpjpe(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> float:
    """MPJPE after the optimal scaling of the centered prediction.

    The scale minimizes the reported mean per-joint distance itself, so
    ``n_mpjpe <= mpjpe`` holds identically (s = 1 is in the search space).
    An all-zero (degenerate) prediction is flagged with a warning and
    compared as-is.
    """
    p = center_at_pelvis(pred, root_index)
    q = center_at_pelvis(gt, root_index)
    if float(np.sum(p * p)) < 1e-12:
        warnings.warn("degenerate all-zero prediction in n_mpjpe")
        return float(np.mean(np.linalg.norm(q, axis=-1)))
    return _n_value(p, q)


def _n_value(p: np.ndarray, q: np.ndarray) -> float:
    s = _best_scale(p, q)
    # A negative least-squares scale would be a reflection; clamp it out.
    s_sq = max(0.0, float(np.sum(p * q)) / float(np.sum(p * p)))
    return min(_mean_norm(s * p, q), _mean_norm(s_sq * p, q), _mean_norm(p, q))


def _weighted_similarity(p: np.ndarray, q: np.ndarray, w: np.ndarray):
    """Weighted Umeyama fit: minimizes sum_k w_k ||s R p_k + t - q_k||^2."""
    w = w / w.sum()
    mu_p = w @ p
    mu_q = w @ q
    pc = p - mu_p
    qc = q - mu_q
    var_p = float(np.sum(w[:, None] * pc**2))
    if var_p < 1e-18:
        return None
    cov = (qc * w[:, None]).T @ pc
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float((d * np.diag(s_fix)).sum() / var_p)
    if scale <= 0:
        return None
    t = mu_q - scale * rot @ mu_p
    return scale, rot, t


def p_mpjpe(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> float:
    """MPJPE after similarity (Procrustes) alignment of pred onto gt.

    The alignment minimizes the reported mean per-joint distance over the
    similarity group.  The Kabsch least-squares solution seeds an IRLS
    refinement, and the identity and scale-only alignments are always kept
    as candidates, which makes ``p_mpjpe <= n_mpjpe <= mpjpe`` structural.
    """
    p = center_at_pelvis(pred, root_index)
    q = center_at_pelvis(gt, root_index)
    if float(np.sum(p * p)) < 1e-12:
        warnings.warn("degenerate prediction in p_mpjpe")
        return float(np.mean(np.linalg.norm(q, axis=-1)))
    best = min(_mean_norm(p, q), _n_value(p, q))
    transform = geo.kabsch_align(p, q, with_scale=True)
    scale, rot, t = transform.scale, transform.rotation, transform.translation
    for _ in range(4):
        aligned = scale * p @ rot.T + t
        best = min(best, _mean_norm(aligned, q))
        d = aligned - q
        r = np.sqrt(np.einsum("...i,...i->...", d, d))
        fit = _weighted_similarity(p, q, 1.0 / np.maximum(r, 1e-9))
        if fit is None:
            break
        new_scale, new_rot, new_t = fit
        moved = abs(new_scale - scale) + np.max(np.abs(new_rot - rot)) + np.max(np.abs(new_t - t))
        scale, rot, t = new_scale, new_rot, new_t
        if moved < 1e-12:
            break
    best = min(best, _mean_norm(scale * p @ rot.T + t, q))
    return best


@dataclass
class MetricReport:
    mpjpe: float
    n_mpjpe: float
    p_mpjpe: float
    per_joint: np.ndarray
    sample_count: int
    degenerate_count: int = 0

    def __post_init__(self):
        if not (self.p_mpjpe <= self.n_mpjpe + 1e-9 and self.n_mpjpe <= self.mpjpe + 1e-9):
            raise ValueError("alignment-group nesting violated in aggregate")

    def to_json(self) -> str:
        return json.dumps(
            {
                "mpjpe": self.mpjpe,
                "n_mpjpe": self.n_mpjpe,
                "p_mpjpe": self.p_mpjpe,
                "per_joint": np.asarray(self.per_joint).tolist(),
                "sample_count": self.sample_count,
                "degenerate_count": self.degenerate_count,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text) -> "MetricReport":
        d = json.loads(text) if isinstance(text, (str, bytes)) else dict(text)
        d["per_joint"] = np.array(d["per_joint"])
        return cls(**d)

    def csv_row(self) -> list:
        return [self.mpjpe, self.n_mpjpe, self.p_mpjpe, self.sample_count]


def report_from_pairs(pairs, root_index: int = 0) -> MetricReport:
    """Aggregate per-sample metrics over (pred, gt) pose pairs."""
    m, n, p = [], [], []
    per_joint = None
    count = 0
    degenerate = 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for pred, gt in pairs:
            m.append(mpjpe(pred, gt, root_index))
            n.append(n_mpjpe(pred, gt, root_index))
            p.append(p_mpjpe(pred, gt, root_index))
            pc = center_at_pelvis(pred, root_index)
            qc = center_at_pelvis(gt, root_index)
            dj = np.linalg.norm(pc - qc, axis=-1)
            per_joint = dj if per_joint is None else per_joint + dj
            count += 1
        degenerate = len(caught)
    if count == 0:
        raise ValueError("no samples to evaluate")
    return MetricReport(
        mpjpe=float(np.mean(m)),
        n_mpjpe=float(np.mean(n)),
        p_mpjpe=float(np.mean(p)),
        per_joint=per_joint / count,
        sample_count=count,
        degenerate_count=degenerate,
    )


def evaluate_model(model, head, testset, norm_stats, train_subjects=None,
                   root_index: int = 0) -> MetricReport:
    """Run the encoder + pose head over labeled test samples and aggregate.

    ``testset`` is a list of :class:`geolatent.datapipe.LabeledSample`.
    When ``train_subjects`` is given, any overlap with the test subjects is
    a hard failure.

    The import of torch lives in :mod:`geolatent.nets`; this function only
    needs the ``predict_poses`` helper there so the metric core stays
    numpy-only.
    """
    if train_subjects is not None:
        overlap = {s.subject_id for s in testset} & set(train_subjects)
        if overlap:
            raise ValueError(f"test subjects overlap training subjects: {sorted(overlap)}")
    from . import nets

    preds = nets.predict_poses(model, head, [s.image for s in testset], norm_stats)
    return report_from_pairs(
        ((preds[i], testset[i].pose) for i in range(len(testset))), root_index
    )
