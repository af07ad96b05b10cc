"""File formats: counts/site CSV ingestion, run configuration, output
tables, and the reproducibility manifest.

Counts are long-format CSV with header
    site_id,occasion,visit,count,<detection covariate columns...>
where absent rows are missing visits.  Site covariates are
    site_id,x,y,<site covariate columns...>
Numeric output uses repr-precision decimals; missing values are empty
fields.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io as _io
import json
from pathlib import Path

import numpy as np

from .data import build_dataset

__all__ = [
    "IngestError",
    "read_sites_csv",
    "read_counts_csv",
    "ingest",
    "write_dataset",
    "write_csv",
    "read_run_config",
    "write_run_config",
    "default_run_config",
    "content_hash",
    "write_manifest",
]


class IngestError(ValueError):
    """Malformed input data; message carries the file and line number."""


def _fail(path, line, message):
    raise IngestError(f"{path}:{line}: {message}")


def _parse_float(path, line, field, raw):
    try:
        return float(raw)
    except ValueError:
        _fail(path, line, f"non-numeric value {raw!r} in column {field!r}")


def read_sites_csv(path):
    """Returns (site_ids, coords, covariate matrix, covariate names)."""
    path = Path(path)
    ids, coords, covs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            _fail(path, 1, "empty file")
        if header[:3] != ["site_id", "x", "y"]:
            _fail(path, 1, "header must start with site_id,x,y")
        names = header[3:]
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                _fail(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            if sid in seen:
                _fail(path, lineno, f"duplicate site_id {sid!r}")
            seen.add(sid)
            ids.append(sid)
            coords.append([_parse_float(path, lineno, "x", row[1]),
                           _parse_float(path, lineno, "y", row[2])])
            covs.append([_parse_float(path, lineno, names[k], row[3 + k])
                         for k in range(len(names))])
    if not ids:
        _fail(path, 2, "no sites")
    return ids, np.array(coords), np.array(covs).reshape(len(ids), len(names)), names


def read_counts_csv(path, site_ids):
    """Returns (obs arrays, detection covariate matrix, covariate names)."""
    path = Path(path)
    index = {sid: i for i, sid in enumerate(site_ids)}
    obs_site, obs_occ, obs_visit, counts, covs = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            _fail(path, 1, "empty file")
        if header[:4] != ["site_id", "occasion", "visit", "count"]:
            _fail(path, 1, "header must start with site_id,occasion,visit,count")
        names = header[4:]
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                _fail(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            if sid not in index:
                _fail(path, lineno, f"unknown site_id {sid!r}")
            try:
                occ, visit, count = int(row[1]), int(row[2]), int(row[3])
            except ValueError:
                _fail(path, lineno, "occasion, visit, and count must be integers")
            if occ < 1 or visit < 1:
                _fail(path, lineno, "occasion and visit are 1-based")
            if count < 0:
                _fail(path, lineno, f"negative count {count}")
            key = (sid, occ, visit)
            if key in seen:
                _fail(path, lineno, f"duplicate (site,occasion,visit) {key}")
            seen.add(key)
            obs_site.append(index[sid])
            obs_occ.append(occ - 1)
            obs_visit.append(visit - 1)
            counts.append(count)
            covs.append([_parse_float(path, lineno, names[k], row[4 + k])
                         for k in range(len(names))])
    return (obs_site, obs_occ, obs_visit, counts,
            np.array(covs).reshape(len(counts), len(names)), names)


def ingest(counts_path, sites_path, n_occasions=None, max_visits=None):
    """Parse, validate, and standardize the two input files into a dataset."""
    site_ids, coords, site_covs, site_names = read_sites_csv(sites_path)
    obs_site, obs_occ, obs_visit, counts, det_covs, det_names = \
        read_counts_csv(counts_path, site_ids)
    return build_dataset(
        site_ids=site_ids, sites=coords,
        site_covariates=site_covs, site_cov_names=site_names,
        obs_site=obs_site, obs_occasion=obs_occ, obs_visit=obs_visit,
        counts=counts, detection_covariates=det_covs, detection_names=det_names,
        n_occasions=n_occasions, max_visits=max_visits,
    )


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return repr(value)
    if isinstance(value, (np.floating,)):
        return _fmt(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    """All output tables go through here: header row, repr-precision floats,
    empty fields for missing values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_dataset(dataset, counts_path, sites_path):
    """Emit a dataset in the ingestion format (covariates on the raw scale,
    so generate -> write -> ingest round-trips exactly)."""
    det_raw = dataset.detection_transform.invert(dataset.detection_covariates)
    site_raw = dataset.site_transform.invert(dataset.site_covariates)
    write_csv(
        sites_path,
        ["site_id", "x", "y", *dataset.site_cov_names],
        [
            [dataset.site_ids[i], dataset.sites[i, 0], dataset.sites[i, 1],
             *site_raw[i]]
            for i in range(dataset.n_sites)
        ],
    )
    write_csv(
        counts_path,
        ["site_id", "occasion", "visit", "count", *dataset.detection_names],
        [
            [dataset.site_ids[dataset.obs_site[r]], dataset.obs_occasion[r] + 1,
             dataset.obs_visit[r] + 1, dataset.counts[r], *det_raw[r]]
            for r in range(dataset.n_observations)
        ],
    )


# ---- run configuration ----------------------------------------------------

def default_run_config():
    """Baseline configuration; sections mirror the module split."""
    cfg = configparser.ConfigParser()
    cfg["run"] = {
        "variant": "M2",
        "family": "cmp",
        "seed": "20240811",
        "chains": "3",
        "workers": "1",
    }
    cfg["data"] = {
        "counts": "counts.csv",
        "sites": "sites.csv",
    }
    cfg["model"] = {
        "forced_beta": "x1",
        "forced_gamma": "",
        "knots": "10",
    }
    cfg["priors"] = {
        "coef_sd": "10.0",
        "nu_lower": "0.02",
        "nu_upper": "2.0",
        "sigma_alpha_shape": "0.1",
        "sigma_alpha_scale": "0.1",
    }
    cfg["sampler"] = {
        "iterations": "40000",
        "burn_in": "20000",
        "thin": "3",
        "zeta": "0.25",
        "eta": "0.1",
        "rw_beta": "0.05",
        "rw_gamma": "0.02",
        "rw_gamma0": "0.05",
        "rw_nu": "0.02",
        "rw_alpha": "0.1",
        "adapt": "true",
        "use_asymptotic_z": "true",
    }
    return cfg


def read_run_config(path):
    cfg = configparser.ConfigParser()
    read = cfg.read(path)
    if not read:
        raise IngestError(f"config file not found: {path}")
    return cfg


def write_run_config(cfg, path):
    with open(path, "w") as fh:
        cfg.write(fh)


def config_text(cfg) -> str:
    buf = _io.StringIO()
    cfg.write(buf)
    return buf.getvalue()


# ---- manifest ---------------------------------------------------------------

def content_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, cfg, seeds, input_paths, outputs):
    payload = {
        "config": config_text(cfg),
        "seeds": list(seeds),
        "inputs": {str(p): content_hash(p) for p in input_paths},
        "outputs": [str(o) for o in outputs],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
