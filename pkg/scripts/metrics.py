"""
Saliency metrics between heatmaps: CC, NSS, KLD, and evaluation of a map
against a rasterized segmentation mask.

All metrics work at float64 with population standard deviations.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateMap, EmptyFixations, GridMismatch, OutOfBounds, ZeroMap


@dataclass(frozen=True)
class Fixations:
    """Grid cells (row, col) standing in for fixation locations."""

    cells: tuple

    def __len__(self):
        return len(self.cells)


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _same_grid(a, b):
    if a.shape != b.shape:
        raise GridMismatch(f"maps on different grids: {a.shape} vs {b.shape}")


def fixations_from_session(session, grid):
    """Viewport centres of a session mapped to cells of ``grid`` (one per sample)."""
    _, bbox, _ = session.arrays
    cx = (bbox[:, 0] + bbox[:, 2]) / 2.0
    cy = (bbox[:, 1] + bbox[:, 3]) / 2.0
    cols = np.minimum((cx * grid.cols).astype(int), grid.cols - 1)
    rows = np.minimum((cy * grid.rows).astype(int), grid.rows - 1)
    return Fixations(tuple(zip(rows.tolist(), cols.tolist())))


def fixations_from_mask(mask, threshold=0.5):
    rows, cols = np.nonzero(_values(mask) > threshold)
    return Fixations(tuple(zip(rows.tolist(), cols.tolist())))


# =========================================================
# 1. CC / NSS / KLD
# =========================================================

def cc(a, b):
    """Pearson correlation of two flattened maps."""
    x = _values(a).ravel()
    y = _values(b).ravel()
    _same_grid(_values(a), _values(b))

    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise DegenerateMap("CC is undefined for a constant map")
    r = np.dot(xc, yc) / (sx * sy)
    return float(np.clip(r, -1.0, 1.0))


def nss(hmap, fix):
    """Mean z-scored map value at the fixation cells."""
    v = _values(hmap)
    if len(fix) == 0:
        raise EmptyFixations("NSS needs at least one fixation")
    sd = v.std()
    if sd == 0:
        raise DegenerateMap("NSS is undefined for a constant map")

    rows, cols = v.shape
    for r, c in fix.cells:
        if not (0 <= r < rows and 0 <= c < cols):
            raise OutOfBounds(f"fixation {(r, c)} outside grid {rows}x{cols}")

    z = (v - v.mean()) / sd
    idx = np.array(fix.cells, dtype=int)
    return float(z[idx[:, 0], idx[:, 1]].mean())


def _as_distribution(v, eps):
    s = v.sum()
    if not s > 0:
        raise ZeroMap("KLD needs maps with positive mass")
    v = np.maximum(v / s, eps)
    return v / v.sum()


def kld(p, q, eps=1e-8, zero_policy="floor"):
    """
    KL(P || Q) in nats, P the ground truth and Q the prediction.

    zero_policy "floor" floors both maps at ``eps`` and renormalizes;
    "discard" sums only over cells where P > 0 and adds ``eps`` to Q.
    """
    pv = _values(p)
    qv = _values(q)
    _same_grid(pv, qv)

    if zero_policy == "floor":
        P = _as_distribution(pv.ravel(), eps)
        Q = _as_distribution(qv.ravel(), eps)
        return float(max(np.sum(P * np.log(P / Q)), 0.0))

    if zero_policy == "discard":
        sp, sq = pv.sum(), qv.sum()
        if not (sp > 0 and sq > 0):
            raise ZeroMap("KLD needs maps with positive mass")
        P = pv.ravel() / sp
        Q = qv.ravel() / sq
        nz = P > 0
        return float(np.sum(P[nz] * np.log(P[nz] / (Q[nz] + eps))))

    raise ConfigError(f"Unsupported zero_policy: {zero_policy}")


def kld_directed(gt, pred, direction="gt_pred", **kwargs):
    if direction == "gt_pred":
        return kld(gt, pred, **kwargs)
    if direction == "pred_gt":
        return kld(pred, gt, **kwargs)
    raise ConfigError(f"Unsupported KLD direction: {direction}")


# =========================================================
# 2. Map vs segmentation mask
# =========================================================

def _or_nan(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DegenerateMap, ZeroMap, EmptyFixations):
        return np.nan


def eval_against_mask(hmap, mask, fix=None, eps=1e-8, direction="gt_pred", zero_policy="floor"):
    """
    Score an attention map against a tumor mask on the same grid.

    cc_seg = CC(map, mask); nss_seg = NSS at cells where mask > 0.5;
    kld_seg = KL(mask || map) after unit-sum normalization. Undefined values
    (constant map, empty mask) are reported as NaN. With ``fix`` given,
    nss_attn is the NSS at those cells (reader viewport centres).
    """
    mv = _values(mask)
    _same_grid(_values(hmap), mv)
    if np.any(mv < 0) or np.any(mv > 1):
        raise OutOfBounds("mask values must lie in [0,1]")

    scores = {
        "cc_seg": _or_nan(cc, hmap, mask),
        "nss_seg": _or_nan(nss, hmap, fixations_from_mask(mask)),
        "kld_seg": _or_nan(kld_directed, mask, hmap, direction, eps=eps, zero_policy=zero_policy),
    }
    if fix is not None:
        scores["nss_attn"] = _or_nan(nss, hmap, fix)
    return scores
