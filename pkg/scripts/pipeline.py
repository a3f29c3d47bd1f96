import logging
import os
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from .analysis import AGREEMENT_GRID, expertise_agreement_report
from .errors import DegenerateMap, MissingInputs, NoSessions, NumericError
from .heatmap import SampleFilter, accumulate, normalize, smooth
from .io import (
    load_checkpoint,
    load_features_dir,
    load_fixations_csv,
    load_heatmap,
    load_masks_dir,
    load_session_file,
    load_sessions,
    parallel_map,
    save_checkpoint,
    save_dataframe,
    save_heatmap,
    save_session,
    write_atnt,
    write_json,
)
from .metrics import Fixations, cc, fixations_from_mask, fixations_from_session, kld_directed, nss
from .models import EXPERTISE_MODES, config_hash
from .report import render_heatmap_svg, write_report
from .synth import generate_cohort
from .telemetry import EXPERTISE_LEVELS, validate_cohort
from .training import (
    ATTENTION_MODELS,
    AttentionSample,
    COHORTS,
    build_attention_targets,
    build_expertise_samples,
    compare_cohort_models,
    cross_validate_attention,
    cross_validate_expertise,
    evaluate_attention,
    expertise_checkpoint_name,
    fold_checkpoint_dir,
    train_attention,
    train_expertise,
)


def _manifest(extra, timestamp=False):
    if timestamp:
        extra = dict(extra, created=datetime.now(timezone.utc).replace(microsecond=0).isoformat())
    return extra


# =========================================================
# ingest / heatmap / metrics
# =========================================================

def run_ingest(sessions_dir, output_dir):
    """Validate a session directory and write the cohort summary tables."""

    sessions = load_sessions(sessions_dir)
    summary = validate_cohort(sessions)

    row = {
        "n_sessions": summary.n_sessions,
        "n_pathologists": summary.n_pathologists,
        "n_wsis": summary.n_wsis,
        "mean_duration_ms": summary.mean_duration_ms,
        "mean_readers_per_wsi": summary.mean_readers_per_wsi,
        "n_flagged": len(summary.flagged),
    }
    for e in EXPERTISE_LEVELS:
        row[f"sessions_{e}"] = summary.sessions_per_expertise[e]
        row[f"pathologists_{e}"] = summary.pathologists_per_expertise[e]

    paths = [
        save_dataframe(pd.DataFrame([row]), output_dir, "cohort_summary"),
        save_dataframe(summary.readers, output_dir, "readers_per_wsi"),
        save_dataframe(pd.DataFrame(list(summary.flagged), columns=["wsi_id", "expertise"]), output_dir, "single_reader_cells"),
    ]
    logging.info(f"{summary.n_sessions} sessions, {summary.n_wsis} WSIs, {len(summary.flagged)} flagged cells")
    return paths


def run_heatmap(session_path, grid, output_path, time_fraction=None, mag_bin=None, norm="raw", blur=None, svg_path=None):
    session = load_session_file(session_path)
    hmap = accumulate(session, grid, SampleFilter(time_fraction, mag_bin))
    if blur:
        hmap = smooth(hmap, blur)
    hmap = normalize(hmap, norm)
    save_heatmap(output_path, hmap)
    if svg_path:
        render_heatmap_svg(hmap, svg_path, title=session.session_id)
    logging.info(f"heatmap of {session.session_id} on {grid.rows}x{grid.cols} written to {output_path}")
    return hmap


def run_metrics(pred_path, gt_path, fixations_path=None, zero_policy="floor", direction="gt_pred"):
    """CC / NSS / KLD of one predicted map against one ground-truth map; undefined values are NaN."""

    pred = load_heatmap(pred_path)
    gt = load_heatmap(gt_path)
    if fixations_path:
        fix = load_fixations_csv(fixations_path)
    else:
        try:
            fix = fixations_from_mask(normalize(gt, "minmax"))
        except DegenerateMap:
            fix = Fixations(())

    scores = {}
    for name, fn in (
        ("cc", lambda: cc(pred, gt)),
        ("nss", lambda: nss(pred, fix)),
        ("kld", lambda: kld_directed(gt, pred, direction, zero_policy=zero_policy)),
    ):
        try:
            scores[name] = fn()
        except NumericError as e:
            logging.warning(f"{name} undefined: {e}")
            scores[name] = np.nan
    return scores


# =========================================================
# agree
# =========================================================

def run_agree(sessions_dir, output_dir, grid=AGREEMENT_GRID):
    sessions = load_sessions(sessions_dir)
    maps = dict(zip(
        [s.session_id for s in sessions],
        parallel_map(lambda s: accumulate(s, grid), sessions),
    ))
    constant = [sid for sid, m in maps.items() if m.values.std() == 0]
    for sid in constant:
        logging.warning(f"session {sid}: constant heatmap, left out of agreement")
        del maps[sid]
    kept = [s for s in sessions if s.session_id in maps]

    points, groups = expertise_agreement_report(kept, grid, maps=maps)
    for _, row in groups.iterrows():
        logging.info(f"{row['expertise']}: r={row['r']:.3f} p={row['p']:.3g} n={row['n']}")
    return [
        save_dataframe(points, output_dir, "agreement_points"),
        save_dataframe(groups, output_dir, "agreement_groups"),
    ]


# =========================================================
# simulate
# =========================================================

def run_simulate(synth, output_dir, timestamp=False):
    """Write a synthetic cohort: sessions/*.jsonl, features/<mag>/<wsi>.atnt, masks/<wsi>.atnt, cohort.json."""

    cohort = generate_cohort(
        synth.n_slides, synth.readers_per_expertise, synth.profiles, synth.seed,
        roi_count=synth.roi_count, feature_dim=synth.feature_dim, noise_sd=synth.noise_sd,
        feature_grids=synth.feature_grids,
    )

    sessions_dir = os.path.join(output_dir, "sessions")
    for s in cohort.sessions:
        save_session(s, sessions_dir)
    for slide in cohort.slides:
        for mag, grid in slide.features.items():
            write_atnt(os.path.join(output_dir, "features", mag, f"{slide.wsi_id}.atnt"), grid.data.astype(np.float32))
        write_atnt(os.path.join(output_dir, "masks", f"{slide.wsi_id}.atnt"), slide.roi_mask.values.astype(np.float32))

    slides = [
        {
            "wsi_id": s.wsi_id,
            "difficulty": s.difficulty,
            "true_grade": [s.true_grade.primary, s.true_grade.secondary],
            "roi_fraction": float(s.roi_mask.values.mean()),
        }
        for s in cohort.slides
    ]
    write_json(os.path.join(output_dir, "cohort.json"), _manifest(dict(cohort.metadata, slides=slides), timestamp))
    return cohort


# =========================================================
# train / eval
# =========================================================

def _cohort_fixations(sessions, wsi_id, grid, cohort):
    levels = COHORTS[cohort]
    cells = set()
    for s in sessions:
        if s.wsi_id == wsi_id and s.expertise in levels:
            cells.update(fixations_from_session(s, grid).cells)
    return Fixations(tuple(sorted(cells)))


def attention_samples(cfg, sessions, mag):
    """One AttentionSample per WSI with features at ``mag`` and at least one cohort session in its bin."""

    features = load_features_dir(cfg.features_dir, mag)
    grid = cfg.grids[mag]
    samples = []
    for wsi_id, feats in features.items():
        try:
            target = build_attention_targets(sessions, wsi_id, cfg.bin(mag), cfg.cohort, grid)
        except (NoSessions, NumericError) as e:
            logging.warning(f"{wsi_id} at {mag}: no usable target ({e})")
            continue
        samples.append(AttentionSample(wsi_id, feats, target, _cohort_fixations(sessions, wsi_id, grid, cfg.cohort)))
    if not samples:
        raise MissingInputs(f"no WSI has both features and {cfg.cohort} sessions at {mag}")
    return samples


def run_train(cfg, models=("attention", "expertise"), timestamp=False):
    """
    k-fold tables plus one checkpoint per model trained on all WSIs.

    Writes attention_table.csv, expertise_table.csv, expertise_folds.csv,
    checkpoints/<model>/ (with one fold<i>/ per cross-validation fold) and
    run.json under the configured output dir.
    """

    cfg.require("sessions_dir", "features_dir")
    sessions = load_sessions(cfg.sessions_dir, cfg.grade_domain)
    out = cfg.out_dir
    ckpt = os.path.join(out, "checkpoints")
    manifest = {"seed": cfg.seed, "k": cfg.k, "cohort": cfg.cohort, "task": cfg.task, "models": {}, "folds": {}}

    def record_folds(name):
        manifest["folds"][name] = [fold_checkpoint_dir("checkpoints", name, i) for i in range(cfg.k)]

    if "attention" in models:
        by_mag = {mag: attention_samples(cfg, sessions, mag) for mag in cfg.magnifications}
        configs = {mag: cfg.attention_config(mag) for mag in cfg.magnifications}
        table = cross_validate_attention(by_mag, configs, cfg.hyper, cfg.k, cfg.seed, checkpoint_dir=ckpt)
        save_dataframe(table, out, "attention_table")
        for mag, samples in by_mag.items():
            for model in ATTENTION_MODELS:
                record_folds(f"{model}_{mag}")
            params = train_attention(configs[mag], samples, cfg.hyper).params
            name = f"prostattformer_{mag}"
            save_checkpoint(params, os.path.join(ckpt, name))
            manifest["models"][name] = {"config_hash": params.config_hash, "seed": params.seed, "n_wsis": len(samples)}

    if "expertise" in models:
        ecfg = cfg.expertise_config()
        features = load_features_dir(cfg.features_dir, cfg.expertise_grid_label)
        usable = [s for s in sessions if s.wsi_id in features]
        samples = build_expertise_samples(usable, features, ecfg.grid, ecfg.n_classes, cfg.mag_bins)
        summary, folds = cross_validate_expertise(samples, ecfg, cfg.hyper, cfg.k, cfg.seed, checkpoint_dir=ckpt)
        for variant in EXPERTISE_MODES:
            record_folds(expertise_checkpoint_name(variant))
        suffix = "" if cfg.task == "3way" else "_2way"
        save_dataframe(summary, out, f"expertise_table{suffix}")
        save_dataframe(folds, out, f"expertise_folds{suffix}")
        params = train_expertise(ecfg, samples, cfg.hyper).params
        save_checkpoint(params, os.path.join(ckpt, "expertisenet"))
        manifest["models"]["expertisenet"] = {"config_hash": params.config_hash, "seed": params.seed, "n_sessions": len(samples)}

    write_json(os.path.join(out, "run.json"), _manifest(manifest, timestamp))
    return manifest


def run_eval(cfg):
    """
    Specialist vs non-specialist training, scored against tumor masks of
    held-out WSIs (cohort_models.csv), and stored ProstAttFormer checkpoints
    rescored on every WSI (attention_eval.csv).
    """

    cfg.require("sessions_dir", "features_dir", "masks_dir")
    sessions = load_sessions(cfg.sessions_dir, cfg.grade_domain)
    masks = load_masks_dir(cfg.masks_dir)
    out = cfg.out_dir

    tables = []
    for mag in cfg.magnifications:
        features = load_features_dir(cfg.features_dir, mag)
        slides = {w: (features[w], masks[w]) for w in sorted(features) if w in masks}
        df = compare_cohort_models(sessions, slides, cfg.attention_config(mag), cfg.hyper, cfg.bin(mag), cfg.k, cfg.seed)
        df.insert(0, "magnification", mag)
        tables.append(df)
    paths = [save_dataframe(pd.concat(tables, ignore_index=True), out, "cohort_models")]

    rows = []
    for mag in cfg.magnifications:
        ckpt = os.path.join(out, "checkpoints", f"prostattformer_{mag}")
        if not os.path.isdir(ckpt):
            continue
        params = load_checkpoint(ckpt)
        if params.config_hash != config_hash(cfg.attention_config(mag)):
            logging.warning(f"{ckpt}: config differs from the experiment config")
        df = evaluate_attention(params, attention_samples(cfg, sessions, mag))
        df.insert(0, "magnification", mag)
        rows.append(df)
    if rows:
        paths.append(save_dataframe(pd.concat(rows, ignore_index=True), out, "attention_eval"))
    return paths


def run_report(run_dir):
    if not os.path.isdir(run_dir):
        raise MissingInputs(f"run directory not found: {run_dir}")
    return write_report(run_dir)
