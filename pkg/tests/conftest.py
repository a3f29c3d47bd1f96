import json

import numpy as np
import pytest

from scripts.heatmap import GridSpec
from scripts.synth import generate_cohort
from scripts.telemetry import GradePair, Session, ViewportSample

SMALL_GRIDS = {
    "2x": GridSpec(4, 4, "2x"),
    "4x": GridSpec(6, 6, "4x"),
    "10x": GridSpec(10, 10, "10x"),
    "20x": GridSpec(12, 12, "20x"),
}


def build_session(rows, session_id="s1", pathologist_id="p1", wsi_id="w1", expertise="general", grade=None):
    """rows: (t_ms, x0, y0, x1, y1, mag) tuples."""
    samples = tuple(ViewportSample(*r) for r in rows)
    return Session(session_id, pathologist_id, wsi_id, expertise, samples, grade)


def header_line(**overrides):
    rec = {
        "type": "header", "session_id": "s1", "pathologist_id": "p1", "wsi_id": "w1",
        "expertise": "specialist", "primary_grade": 3, "secondary_grade": 4, "confidence": 0.8,
    }
    rec.update(overrides)
    return json.dumps(rec)


def sample_line(t, x0=0.0, y0=0.0, x1=0.5, y1=0.5, mag=10.0):
    return json.dumps({"type": "sample", "t_ms": t, "x0": x0, "y0": y0, "x1": x1, "y1": y1, "mag": mag})


def random_session(rng, n=None, session_id="r", wsi_id="w1", expertise="general"):
    n = n or int(rng.integers(2, 40))
    t = np.cumsum(rng.integers(1, 500, size=n))
    rows = []
    for ti in t:
        side = rng.uniform(0.02, 0.9)
        x0, y0 = rng.uniform(0.0, 1.0 - side, size=2)
        rows.append((int(ti), float(x0), float(y0), float(min(x0 + side, 1.0)), float(min(y0 + side, 1.0)),
                     float(rng.uniform(1.0, 30.0))))
    return build_session(rows, session_id=session_id, wsi_id=wsi_id, expertise=expertise,
                         grade=GradePair(int(rng.integers(3, 6)), int(rng.integers(3, 6))))


@pytest.fixture
def two_sample_session():
    return build_session([(0, 0.0, 0.0, 0.5, 0.5, 10.0), (1000, 0.5, 0.5, 1.0, 1.0, 10.0)])


@pytest.fixture(scope="session")
def tiny_cohort():
    return generate_cohort(6, 3, seed=7, grids=SMALL_GRIDS, feature_dim=8, feature_grids=("10x", "20x"))
