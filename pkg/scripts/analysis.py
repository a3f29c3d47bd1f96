import logging
import math
from collections import namedtuple
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.special import betainc

from .errors import (
    ConstantInput,
    DegenerateMap,
    TooFewGrades,
    TooFewMaps,
    TooFewPoints,
)
from .heatmap import GridSpec, accumulate
from .metrics import cc
from .telemetry import DEFAULT_GRADE_DOMAIN, EXPERTISE_LEVELS

AGREEMENT_GRID = GridSpec(50, 50, "10x")

PearsonResult = namedtuple("PearsonResult", ["r", "p", "slope", "intercept", "n"])


# =========================================================
# 1. Grade concordance
# =========================================================

def grade_concordance(gi, gj, domain=DEFAULT_GRADE_DOMAIN):
    """
    Normalized concordance between two (primary, secondary) Gleason gradings.

    1 - ||(dPG, dSG)|| / ||(dPG_max, dSG_max)||, the maxima taken over the
    grade domain.
    """
    gi.check_domain(domain)
    gj.check_domain(domain)
    span = max(domain) - min(domain)
    if span == 0:
        return 1.0
    d = math.hypot(gi.primary - gj.primary, gi.secondary - gj.secondary)
    return 1.0 - d / math.hypot(span, span)


def mean_pairwise_concordance(grades, domain=DEFAULT_GRADE_DOMAIN):
    if len(grades) < 2:
        raise TooFewGrades(f"need at least 2 gradings, got {len(grades)}")
    scores = [grade_concordance(a, b, domain) for a, b in combinations(grades, 2)]
    return float(np.mean(scores))


# =========================================================
# 2. Attention agreement
# =========================================================

def pairwise_attention_agreement(maps):
    """Mean CC over all unordered pairs of maps."""
    if len(maps) < 2:
        raise TooFewMaps(f"need at least 2 maps, got {len(maps)}")
    return float(np.mean([cc(a, b) for a, b in combinations(maps, 2)]))


# =========================================================
# 3. Correlation with significance
# =========================================================

def student_t_sf(t, df):
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(tail if t >= 0 else 1.0 - tail)


def pearson_with_p(xs, ys):
    """
    Pearson r, two-tailed p-value, and least-squares line of ys on xs.

    p comes from t = r * sqrt((n-2)/(1-r^2)) against Student's t with n-2
    degrees of freedom.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise TooFewPoints(f"need at least 3 paired points, got {n}")

    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        raise ConstantInput("correlation is undefined for constant input")

    r = float(np.clip(np.dot(xc, yc) / math.sqrt(sxx * syy), -1.0, 1.0))
    slope = float(np.dot(xc, yc) / sxx)
    intercept = float(y.mean() - slope * x.mean())

    df = n - 2
    if abs(r) >= 1.0:
        p = 0.0
    else:
        t = abs(r) * math.sqrt(df / (1.0 - r * r))
        p = min(1.0, 2.0 * student_t_sf(t, df))
    return PearsonResult(r, p, slope, intercept, n)


# =========================================================
# 4. Expertise agreement report
# =========================================================

def _session_map(session, grid):
    hmap = accumulate(session, grid)
    if hmap.values.std() == 0:
        logging.warning(f"session {session.session_id}: constant heatmap, left out of agreement")
        return None
    return hmap


def expertise_agreement_report(sessions, grid=AGREEMENT_GRID, domain=DEFAULT_GRADE_DOMAIN, maps=None):
    """
    Per (WSI, expertise) attention agreement vs grade concordance.

    Parameters
    ----------
    sessions : list of Session
    grid : GridSpec
        Grid the agreement heatmaps are computed on.
    maps : dict, optional
        Precomputed heatmaps keyed by session_id.

    Returns
    -------
    (pd.DataFrame, pd.DataFrame)
        Points (one row per WSI/expertise with >= 2 readers) and per-group
        statistics (r, p, slope, intercept, n, mean_concordance, mean_agreement).
    """

    point_cols = ["wsi_id", "expertise", "n_readers", "attn_agreement", "grade_concordance"]
    groups = {}
    for s in sessions:
        groups.setdefault((s.wsi_id, s.expertise), []).append(s)

    points = []
    for (wsi, exp), members in sorted(groups.items()):
        members = sorted(members, key=lambda s: s.session_id)
        if len(members) < 2:
            continue

        hmaps = []
        for s in members:
            m = maps[s.session_id] if maps is not None else _session_map(s, grid)
            if m is not None:
                hmaps.append(m)
        try:
            agreement = pairwise_attention_agreement(hmaps)
        except (TooFewMaps, DegenerateMap):
            logging.warning(f"{wsi}/{exp}: fewer than 2 usable heatmaps, point skipped")
            continue

        graded = [s.grade for s in members if s.grade is not None]
        concordance = mean_pairwise_concordance(graded, domain) if len(graded) >= 2 else np.nan

        points.append({
            "wsi_id": wsi,
            "expertise": exp,
            "n_readers": len(hmaps),
            "attn_agreement": agreement,
            "grade_concordance": concordance,
        })

    points = pd.DataFrame(points, columns=point_cols)

    stats = []
    for exp in EXPERTISE_LEVELS:
        sub = points[points["expertise"] == exp].dropna(subset=["grade_concordance"])
        if sub.empty:
            continue
        row = {
            "expertise": exp,
            "n": len(sub),
            "r": np.nan, "p": np.nan, "slope": np.nan, "intercept": np.nan,
            "mean_concordance": float(sub["grade_concordance"].mean()),
            "mean_agreement": float(sub["attn_agreement"].mean()),
        }
        try:
            res = pearson_with_p(sub["attn_agreement"], sub["grade_concordance"])
            row.update(r=res.r, p=res.p, slope=res.slope, intercept=res.intercept)
        except (TooFewPoints, ConstantInput) as e:
            logging.info(f"{exp}: regression undefined ({e})")
        stats.append(row)

    stat_cols = ["expertise", "n", "r", "p", "slope", "intercept", "mean_concordance", "mean_agreement"]
    return points, pd.DataFrame(stats, columns=stat_cols)
