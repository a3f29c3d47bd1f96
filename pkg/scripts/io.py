import glob
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from .errors import ConfigError, DimMismatch, MissingInputs
from .heatmap import GridSpec, Heatmap
from .metrics import Fixations
from .models import config_from_dict, params_from_arrays
from .telemetry import (
    DEFAULT_GRADE_DOMAIN,
    decode_atnt,
    dump_session_log,
    encode_atnt,
    load_feature_tensor,
    parse_session_log,
)

THREADS_ENV = "ATTNSCOPE_THREADS"
FLOAT_FORMAT = "%.10g"


# =========================================================
# 1. Worker pool
# =========================================================

def worker_threads():
    """Thread cap from ATTNSCOPE_THREADS (default: CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def parallel_map(fn, items):
    """Map ``fn`` over ``items`` on the worker pool; results keep input order."""
    items = list(items)
    n = min(worker_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# =========================================================
# 2. Sessions
# =========================================================

def load_session_file(path, grade_domain=DEFAULT_GRADE_DOMAIN):
    with open(path, "rb") as f:
        return parse_session_log(f.read(), grade_domain)


def load_sessions(input_dir, grade_domain=DEFAULT_GRADE_DOMAIN):
    """
    Load every ``*.jsonl`` session log of a directory (sorted by file name).
    """

    if not os.path.isdir(input_dir):
        raise FileNotFoundError(f"Session directory not found: {input_dir}")

    files = sorted(glob.glob(os.path.join(input_dir, "*.jsonl")))
    if not files:
        raise MissingInputs(f"No session logs (*.jsonl) found in {input_dir}")

    sessions = parallel_map(lambda p: load_session_file(p, grade_domain), files)
    logging.info(f"Loaded {len(sessions)} sessions from {input_dir}")
    return sessions


def save_session(session, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, f"{session.session_id}.jsonl")
    with open(path, "wb") as f:
        f.write(dump_session_log(session))
    return path


# =========================================================
# 3. ATNT files: features, masks, heatmaps
# =========================================================

def read_atnt(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "rb") as f:
        return decode_atnt(f.read())


def write_atnt(path, array):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_atnt(array))
    return path


def load_feature_file(path):
    with open(path, "rb") as f:
        return load_feature_tensor(f.read())


def load_features_dir(features_dir, mag_level):
    """
    Feature grids of one magnification: ``<features_dir>/<mag_level>/<wsi_id>.atnt``.

    Returns
    -------
    dict
        wsi_id -> FeatureGrid.
    """

    sub_dir = os.path.join(features_dir, mag_level)
    files = sorted(glob.glob(os.path.join(sub_dir, "*.atnt")))
    if not files:
        raise MissingInputs(f"No feature tensors found in {sub_dir}")
    wsi_ids = [os.path.basename(p)[:-len(".atnt")] for p in files]
    return dict(zip(wsi_ids, parallel_map(load_feature_file, files)))


def load_heatmap(path, mag_level="custom", norm="raw"):
    values = read_atnt(path)
    if values.ndim != 2:
        raise DimMismatch(f"heatmap file must hold a 2-d array, found {values.ndim} dims: {path}")
    grid = GridSpec(values.shape[0], values.shape[1], mag_level)
    return Heatmap(grid, values, norm)


def save_heatmap(path, hmap):
    return write_atnt(path, np.asarray(hmap.values, dtype=np.float32))


def load_masks_dir(masks_dir):
    files = sorted(glob.glob(os.path.join(masks_dir, "*.atnt")))
    if not files:
        raise MissingInputs(f"No masks found in {masks_dir}")
    return {os.path.basename(p)[:-len(".atnt")]: load_heatmap(p, "20x") for p in files}


def load_fixations_csv(path):
    """Fixation cells from a CSV with ``row`` and ``col`` columns."""
    df = pd.read_csv(path)
    missing = {"row", "col"} - set(df.columns)
    if missing:
        raise ConfigError(f"fixation file {path} lacks columns {sorted(missing)}")
    return Fixations(tuple(zip(df["row"].astype(int).tolist(), df["col"].astype(int).tolist())))


# =========================================================
# 4. Tables and manifests
# =========================================================

def save_dataframe(df, output_dir, name):
    """
    Save a DataFrame as ``<output_dir>/<name>.csv`` with a fixed float format.
    """

    os.makedirs(output_dir, exist_ok=True)
    output_file = os.path.join(output_dir, f"{name}.csv")
    df.to_csv(output_file, index=False, float_format=FLOAT_FORMAT)
    return output_file


def write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})")


# =========================================================
# 5. Checkpoints
# =========================================================

def save_checkpoint(params, output_dir):
    """
    One float64 ATNT file per parameter, plus ``manifest.json`` (names,
    shapes, seed, config hash) and ``config.json``.
    """

    os.makedirs(output_dir, exist_ok=True)
    entries = []
    for name, t in params.tensors.items():
        file_name = f"{name}.atnt"
        write_atnt(os.path.join(output_dir, file_name), t.data)
        entries.append({"name": name, "file": file_name, "shape": list(t.shape)})

    write_json(os.path.join(output_dir, "config.json"), params.config.to_dict())
    write_json(os.path.join(output_dir, "manifest.json"), {
        "kind": params.config.kind,
        "seed": params.seed,
        "config_hash": params.config_hash,
        "layout": "ExpertiseNet conv inputs are channels-first; ProstAttFormer tokens are row-major",
        "params": entries,
    })
    return output_dir


def load_checkpoint(input_dir):
    manifest = read_json(os.path.join(input_dir, "manifest.json"))
    config = config_from_dict(read_json(os.path.join(input_dir, "config.json")))
    arrays = {e["name"]: read_atnt(os.path.join(input_dir, e["file"])) for e in manifest["params"]}
    params = params_from_arrays(config, arrays, manifest.get("seed", 0))
    if params.config_hash != manifest.get("config_hash"):
        raise ConfigError(f"checkpoint {input_dir}: config hash does not match manifest")
    return params
