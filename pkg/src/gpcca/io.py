"""Delimited-text ingestion and model/result export for the CLI.

On disk, matrices carry samples as rows and features as columns with a
header row of feature names, an optional leading sample-ID column, and
missing entries spelled "NA" or left empty. In memory everything is
transposed to features-as-rows. Numbers are written with 17 significant
digits so values round-trip exactly through decimal text.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import DataError
from .model import ModalityLayout, ModelParams, stack_modalities

__all__ = [
    "MatrixFile",
    "read_matrix",
    "write_matrix",
    "load_modalities",
    "save_model",
    "load_model",
    "read_labels",
    "write_labels",
]

_FMT = "%.17g"
_MISSING = {"", "NA"}


class MatrixFile:
    """Parsed delimited matrix: sample IDs, feature names, (n x p) values
    with NaN at missing entries."""

    def __init__(self, sample_ids, feature_names, values):
        self.sample_ids = list(sample_ids)
        self.feature_names = list(feature_names)
        self.values = values  # (n_samples, n_features), NaN for missing


def _parse_cell(cell: str, path: str, line: int, col: int) -> float:
    cell = cell.strip()
    if cell in _MISSING:
        return np.nan
    try:
        value = float(cell)
    except ValueError:
        raise DataError(
            f"{path}:{line}: column {col}: cannot parse {cell!r} as a number"
        ) from None
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: column {col}: non-finite value {cell!r}")
    return value


def _looks_numeric(cell: str) -> bool:
    cell = cell.strip()
    if cell in _MISSING:
        return True
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_matrix(path: str) -> MatrixFile:
    """Read one samples-by-features CSV.

    The first column is treated as sample IDs when its header cell is empty
    or any of its entries is not numeric; otherwise all columns are data.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 1:
        raise DataError(f"{path}:1: empty header row")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    width = len(header)
    for i, row in enumerate(body, start=2):
        if len(row) != width:
            raise DataError(f"{path}:{i}: expected {width} columns, found {len(row)}")

    has_ids = header[0].strip() == "" or any(
        not _looks_numeric(row[0]) for row in body
    )
    start = 1 if has_ids else 0
    feature_names = [h.strip() for h in header[start:]]
    if has_ids:
        sample_ids = [row[0].strip() for row in body]
        if len(set(sample_ids)) != len(sample_ids):
            raise DataError(f"{path}: duplicate sample IDs")
    else:
        sample_ids = [str(i) for i in range(1, len(body) + 1)]

    values = np.empty((len(body), len(feature_names)))
    for i, row in enumerate(body):
        for j, cell in enumerate(row[start:]):
            values[i, j] = _parse_cell(cell, path, i + 2, j + start + 1)
    return MatrixFile(sample_ids, feature_names, values)


def write_matrix(path: str, sample_ids, feature_names, values) -> None:
    """Write a samples-by-features CSV with NA for missing entries."""
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(feature_names))
        for sid, row in zip(sample_ids, values):
            writer.writerow([sid] + ["NA" if not np.isfinite(v) else _FMT % v for v in row])


def load_modalities(paths):
    """Read one file per modality and stack them into a dataset.

    Returns (dataset, sample_ids, per-modality feature names). Sample IDs
    and counts must agree across files.
    """
    parsed = [read_matrix(p) for p in paths]
    n0 = parsed[0].values.shape[0]
    for p, mf in zip(paths, parsed):
        if mf.values.shape[0] != n0:
            raise DataError(
                f"sample count mismatch: {paths[0]} has {n0} rows, "
                f"{p} has {mf.values.shape[0]} rows"
            )
    ids0 = parsed[0].sample_ids
    for p, mf in zip(paths[1:], parsed[1:]):
        if mf.sample_ids != ids0:
            raise DataError(f"sample IDs disagree between {paths[0]} and {p}")
    blocks = [mf.values.T for mf in parsed]
    dataset = stack_modalities(blocks)
    return dataset, ids0, [mf.feature_names for mf in parsed]


def save_model(
    out_dir: str,
    params: ModelParams,
    *,
    sample_ids,
    feature_names,
    embeddings=None,
    loglik_trace=None,
    loglik_trace_unpenalized=None,
    meta=None,
) -> None:
    """Write the fitted model directory.

    Layout: manifest.json (dimensions, ridge weight, layout, convergence
    metadata), loadings.csv (features x factors), means.csv, one
    psi_block_<r>.csv per modality, embeddings.csv, loglik_trace.csv.
    """
    os.makedirs(out_dir, exist_ok=True)
    flat_names = [name for group in feature_names for name in group]
    d = params.d
    factor_names = [f"factor_{j+1}" for j in range(d)]

    manifest = {
        "format_version": 1,
        "latent_dim": d,
        "ridge_lambda": params.ridge_lambda,
        "modality_sizes": list(params.layout.sizes),
        "n_samples": len(sample_ids),
        "feature_names": [list(g) for g in feature_names],
    }
    manifest.update(meta or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    write_matrix(
        os.path.join(out_dir, "loadings.csv"), flat_names, factor_names, params.loadings
    )
    write_matrix(
        os.path.join(out_dir, "means.csv"), flat_names, ["mean"], params.means[:, None]
    )
    for r, (block, sl) in enumerate(
        zip(params.psi_blocks, params.layout.block_slices()), start=1
    ):
        names = flat_names[sl.start : sl.stop]
        write_matrix(os.path.join(out_dir, f"psi_block_{r}.csv"), names, names, block)
    if embeddings is not None:
        write_matrix(
            os.path.join(out_dir, "embeddings.csv"),
            sample_ids,
            factor_names,
            np.asarray(embeddings).T,
        )
    if loglik_trace is not None:
        trace = np.asarray(loglik_trace)
        unpen = (
            np.asarray(loglik_trace_unpenalized)
            if loglik_trace_unpenalized is not None
            else np.full_like(trace, np.nan)
        )
        write_matrix(
            os.path.join(out_dir, "loglik_trace.csv"),
            [str(i) for i in range(trace.size)],
            ["penalized", "unpenalized"],
            np.column_stack([trace, unpen]),
        )


def load_model(model_dir: str):
    """Read a model directory written by :func:`save_model`."""
    manifest_path = os.path.join(model_dir, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{manifest_path}: not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from None

    sizes = tuple(int(s) for s in manifest["modality_sizes"])
    layout = ModalityLayout(sizes)
    loadings = read_matrix(os.path.join(model_dir, "loadings.csv")).values
    means = read_matrix(os.path.join(model_dir, "means.csv")).values[:, 0]
    blocks = [
        read_matrix(os.path.join(model_dir, f"psi_block_{r}.csv")).values
        for r in range(1, len(sizes) + 1)
    ]
    params = ModelParams(
        loadings=loadings,
        means=means,
        psi_blocks=blocks,
        layout=layout,
        ridge_lambda=float(manifest.get("ridge_lambda", 1.0)),
    )
    return params, manifest


def read_labels(path: str) -> dict:
    """Read a (sample_id, label) CSV into an ordered mapping."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    body = rows[1:] if rows[0] and rows[0][0].strip() in ("sample_id", "") else rows
    out = {}
    for i, row in enumerate(body, start=1):
        if len(row) < 2:
            raise DataError(f"{path}:{i}: expected sample_id,label")
        sid = row[0].strip()
        if sid in out:
            raise DataError(f"{path}: duplicate sample ID {sid!r}")
        out[sid] = row[1].strip()
    return out


def write_labels(path: str, sample_ids, labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"])
        for sid, lab in zip(sample_ids, labels):
            writer.writerow([sid, lab])
