"""
Synthetic slides, feature grids and expertise-conditioned reading sessions.

Every random draw comes from a generator seeded by (cohort seed, item id), so
a cohort is reproducible bit for bit and independent of worker scheduling.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InvalidProfileOrder
from .heatmap import DEFAULT_GRIDS, DEFAULT_MAG_BINS, Heatmap
from .io import parallel_map
from .telemetry import (
    DEFAULT_FEATURE_DIM,
    DEFAULT_GRADE_DOMAIN,
    EXPERTISE_LEVELS,
    FeatureGrid,
    GradePair,
    Session,
    ViewportSample,
)

ROI_GRID = "20x"
SIGNAL_CHANNELS = 3
ELLIPSE_CENTER = (0.2, 0.8)
ELLIPSE_AXIS = (0.14, 0.2)
DIFFICULTY_AFFINITY_DROP = 0.9
DIFFICULTY_NOISE_BASE = 0.25
DIFFICULTY_NOISE_GAIN = 2.0
MAG_STICKINESS = 0.6


@dataclass(frozen=True)
class ExpertiseProfile:
    roi_affinity: float
    mag_mix: tuple
    step_scale: float
    dwell_ms: float
    grade_noise_sd: float
    n_samples: int = 150

    def __post_init__(self):
        mix = np.asarray(self.mag_mix, dtype=np.float64)
        if len(mix) != len(DEFAULT_MAG_BINS) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mag_mix must be {len(DEFAULT_MAG_BINS)} non-negative weights summing to 1: {self.mag_mix}")
        if not 0.0 <= self.roi_affinity <= 1.0:
            raise ConfigError(f"roi_affinity must lie in [0,1]: {self.roi_affinity}")
        if self.step_scale <= 0 or self.dwell_ms <= 0 or self.grade_noise_sd < 0 or self.n_samples < 2:
            raise ConfigError(f"invalid expertise profile: {self}")


DEFAULT_PROFILES = {
    "resident": ExpertiseProfile(0.4, (0.55, 0.3, 0.1, 0.05), 0.08, 150.0, 1.0),
    "general": ExpertiseProfile(0.6, (0.15, 0.45, 0.3, 0.1), 0.06, 200.0, 0.5),
    "specialist": ExpertiseProfile(0.85, (0.05, 0.1, 0.35, 0.5), 0.05, 250.0, 0.15),
}


@dataclass(frozen=True, eq=False)
class SyntheticSlide:
    wsi_id: str
    roi_mask: Heatmap
    features: dict
    difficulty: float
    true_grade: GradePair
    ellipses: tuple = ()


@dataclass
class SyntheticCohort:
    slides: list
    sessions: list
    metadata: dict = field(default_factory=dict)

    @property
    def labels(self):
        return {s.session_id: s.expertise for s in self.sessions}


def item_seed(seed, item_id):
    """Integer seed derived from (cohort seed, item id)."""
    h = int.from_bytes(hashlib.sha256(str(item_id).encode("utf-8")).digest()[:8], "little")
    return int(np.random.SeedSequence([int(seed), h]).generate_state(1, dtype=np.uint64)[0])


def load_profiles(data):
    """Profiles from a JSON dict (or path) keyed by expertise; missing levels keep the defaults."""
    if isinstance(data, str):
        with open(data) as f:
            data = json.load(f)
    profiles = dict(DEFAULT_PROFILES)
    for name, spec in data.items():
        if name not in EXPERTISE_LEVELS:
            raise ConfigError(f"Unsupported expertise in profiles: {name}")
        try:
            spec = dict(spec, mag_mix=tuple(spec["mag_mix"]))
            profiles[name] = ExpertiseProfile(**spec)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"profile {name}: {e}")
    return profiles


def profiles_to_dict(profiles):
    return {name: dict(asdict(p), mag_mix=list(p.mag_mix)) for name, p in profiles.items()}


def check_profile_order(profiles):
    res, gen, spec = (profiles[e] for e in EXPERTISE_LEVELS)
    if not spec.roi_affinity > gen.roi_affinity > res.roi_affinity:
        raise InvalidProfileOrder("roi_affinity must increase resident < general < specialist")
    if not (spec.grade_noise_sd < gen.grade_noise_sd and spec.grade_noise_sd < res.grade_noise_sd):
        raise InvalidProfileOrder("specialist grade_noise_sd must be the smallest")


# =========================================================
# 1. Slides
# =========================================================

def _rasterize(ellipses, grid):
    rows = (np.arange(grid.rows) + 0.5) / grid.rows
    cols = (np.arange(grid.cols) + 0.5) / grid.cols
    y, x = np.meshgrid(rows, cols, indexing="ij")
    mask = np.zeros(grid.shape)
    for cx, cy, ax, ay in ellipses:
        mask[((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0] = 1.0
    return mask


def _features(mask, dim, noise_sd, rng):
    data = rng.standard_normal((*mask.shape, dim))
    signal = gaussian_filter(mask, sigma=1.0, mode="reflect")
    for c in range(min(SIGNAL_CHANNELS, dim)):
        data[:, :, c] = signal + noise_sd * rng.standard_normal(mask.shape)
    return FeatureGrid(data)


def generate_slide(seed, grids=None, roi_count=2, feature_dim=DEFAULT_FEATURE_DIM, noise_sd=0.1,
                   wsi_id=None, difficulty=None, feature_grids=None):
    """
    A synthetic slide: ROI = union of ``roi_count`` random ellipses, features
    whose first channels carry the smoothed ROI mask plus noise.

    Parameters
    ----------
    grids : dict, optional
        Magnification label -> GridSpec; must contain "20x" for the mask.
    feature_grids : iterable of str, optional
        Labels to generate features for (default: every grid).
    difficulty : float, optional
        Drawn uniformly from [0,1] when omitted.
    """
    if roi_count < 0:
        raise ConfigError(f"roi_count must be >= 0, got {roi_count}")
    grids = grids or DEFAULT_GRIDS
    rng = np.random.default_rng(seed)

    ellipses = tuple(
        (*rng.uniform(*ELLIPSE_CENTER, size=2), *rng.uniform(*ELLIPSE_AXIS, size=2))
        for _ in range(roi_count)
    )
    if difficulty is None:
        difficulty = float(rng.uniform(0.0, 1.0))
    lo, hi = min(DEFAULT_GRADE_DOMAIN), max(DEFAULT_GRADE_DOMAIN)
    true_grade = GradePair(int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))

    features = {}
    for label in feature_grids if feature_grids is not None else grids:
        features[label] = _features(_rasterize(ellipses, grids[label]), feature_dim, noise_sd, rng)

    mask_grid = grids[ROI_GRID]
    return SyntheticSlide(
        wsi_id=wsi_id or f"wsi_{seed}",
        roi_mask=Heatmap(mask_grid, _rasterize(ellipses, mask_grid), "raw"),
        features=features,
        difficulty=difficulty,
        true_grade=true_grade,
        ellipses=ellipses,
    )


# =========================================================
# 2. Sessions
# =========================================================

def _roi_point(cells, grid, rng):
    r, c = cells[rng.integers(len(cells))]
    return np.array([(c + rng.random()) / grid.cols, (r + rng.random()) / grid.rows])


def _reflect(p):
    p = np.abs(p)
    return np.where(p > 1.0, 2.0 - p, p).clip(0.0, 1.0)


def _sample_mag(bin_idx, rng):
    b = DEFAULT_MAG_BINS[bin_idx]
    return b.lo + (b.hi - b.lo) * (1.0 - rng.random())


def _noisy_grade(true_grade, sd, rng):
    lo, hi = min(DEFAULT_GRADE_DOMAIN), max(DEFAULT_GRADE_DOMAIN)
    def draw(g):
        return int(np.clip(g + np.round(rng.normal(0.0, sd)), lo, hi))
    return GradePair(draw(true_grade.primary), draw(true_grade.secondary))


def generate_session(slide, profile, true_grade=None, seed=0, session_id=None,
                     pathologist_id="reader", expertise="general"):
    """
    Random-walk viewport trajectory over ``slide``.

    Each step jumps into the ROI with probability roi_affinity (lowered on
    difficult slides), otherwise takes a Gaussian step reflected at the slide
    border. Magnification bins are sticky between steps; the viewport side is
    1/mag of the slide. The grade noise sd grows linearly with difficulty, from
    a quarter of grade_noise_sd on easy slides to 2.25 times it on the hardest.
    """
    rng = np.random.default_rng(seed)
    affinity = profile.roi_affinity * (1.0 - DIFFICULTY_AFFINITY_DROP * slide.difficulty)
    grid = slide.roi_mask.grid
    roi_cells = np.argwhere(slide.roi_mask.values > 0.5)
    mix = np.asarray(profile.mag_mix, dtype=np.float64)

    pos = rng.uniform(0.0, 1.0, size=2)
    bin_idx = int(rng.choice(len(mix), p=mix))
    t = 0
    samples = []
    for _ in range(profile.n_samples):
        if len(roi_cells) and rng.random() < affinity:
            pos = _roi_point(roi_cells, grid, rng)
        else:
            pos = _reflect(pos + rng.normal(0.0, profile.step_scale, size=2))
        if rng.random() > MAG_STICKINESS:
            bin_idx = int(rng.choice(len(mix), p=mix))
        mag = _sample_mag(bin_idx, rng)

        half = min(1.0, 1.0 / mag) / 2.0
        cx, cy = np.clip(pos, half, 1.0 - half)
        samples.append(ViewportSample(
            t_ms=t,
            x0=float(max(cx - half, 0.0)), y0=float(max(cy - half, 0.0)),
            x1=float(min(cx + half, 1.0)), y1=float(min(cy + half, 1.0)),
            mag=float(mag),
        ))
        t += max(1, int(round(rng.gamma(4.0, profile.dwell_ms / 4.0))))

    grade = None
    true_grade = true_grade or slide.true_grade
    if true_grade is not None:
        sd = profile.grade_noise_sd * (DIFFICULTY_NOISE_BASE + DIFFICULTY_NOISE_GAIN * slide.difficulty)
        grade = _noisy_grade(true_grade, sd, rng)

    return Session(
        session_id=session_id or f"{slide.wsi_id}_{pathologist_id}",
        pathologist_id=pathologist_id,
        wsi_id=slide.wsi_id,
        expertise=expertise,
        samples=tuple(samples),
        grade=grade,
    )


# =========================================================
# 3. Cohorts
# =========================================================

def reader_ids(readers_per_expertise):
    if isinstance(readers_per_expertise, int):
        readers_per_expertise = {e: readers_per_expertise for e in EXPERTISE_LEVELS}
    return [(e, f"{e[:3]}{j:02d}") for e in EXPERTISE_LEVELS for j in range(readers_per_expertise.get(e, 0))]


def generate_cohort(n_slides, readers_per_expertise=4, profiles=None, seed=0, grids=None, roi_count=2,
                    feature_dim=DEFAULT_FEATURE_DIM, noise_sd=0.1, feature_grids=None):
    """
    Every reader reads every slide.

    Returns
    -------
    SyntheticCohort
        Slides in wsi order, sessions in (wsi, expertise, reader) order, and a
        metadata dict echoing the requested counts.
    """
    profiles = profiles or DEFAULT_PROFILES
    check_profile_order(profiles)
    readers = reader_ids(readers_per_expertise)

    wsi_ids = [f"wsi{i:03d}" for i in range(n_slides)]
    slides = parallel_map(
        lambda w: generate_slide(item_seed(seed, w), grids, roi_count, feature_dim, noise_sd,
                                 wsi_id=w, feature_grids=feature_grids),
        wsi_ids,
    )

    jobs = [(slide, exp, pid) for slide in slides for exp, pid in readers]
    sessions = parallel_map(
        lambda job: generate_session(
            job[0], profiles[job[1]], seed=item_seed(seed, f"{job[0].wsi_id}/{job[2]}"),
            pathologist_id=job[2], expertise=job[1],
        ),
        jobs,
    )

    counts = {e: sum(1 for x, _ in readers if x == e) for e in EXPERTISE_LEVELS}
    logging.info(f"synthetic cohort: {n_slides} slides, readers {counts}, {len(sessions)} sessions")
    metadata = {
        "seed": seed,
        "n_slides": n_slides,
        "readers_per_expertise": counts,
        "n_sessions": len(sessions),
        "roi_count": roi_count,
        "feature_dim": feature_dim,
        "noise_sd": noise_sd,
        "profiles": profiles_to_dict(profiles),
    }
    return SyntheticCohort(slides, sessions, metadata)


def roi_fraction(slide):
    return float(slide.roi_mask.values.mean())
