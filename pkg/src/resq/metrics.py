"""Pure evaluation metrics: word error rate, relative error reduction,
deterministic 2-D projection, and nearest-neighbor label agreement."""
from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np


def wer(reference, hypothesis) -> float:
    """(substitutions + deletions + insertions) / len(reference) via
    Levenshtein alignment over word tokens."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("WER needs a non-empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1,            # deletion
                         cur[j - 1] + 1,         # insertion
                         prev[j - 1] + (r != h))  # substitution / match
        prev = cur
    return prev[-1] / len(ref)


def rer(baseline_wer: float, new_wer: float) -> float:
    """Relative error reduction in percent."""
    if baseline_wer <= 0:
        raise ValueError("relative error reduction undefined for zero baseline")
    return 100.0 * (baseline_wer - new_wer) / baseline_wer


def micro_wer(pairs) -> float:
    """Corpus-level WER: total edit errors over total reference words."""
    errors = 0.0
    words = 0
    for ref, hyp in pairs:
        errors += wer(ref, hyp) * len(ref)
        words += len(ref)
    if words == 0:
        raise ValueError("no reference words")
    return errors / words


def project2d(features: np.ndarray, labels=None) -> np.ndarray:
    """Deterministic PCA to two components.

    Component signs are fixed so each component's largest-magnitude
    loading is positive. Rank-deficient input degrades to zeros with a
    warning rather than failing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need an (N >= 3) x H feature matrix")
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        warnings.warn("projection input has no variance; returning zeros")
        return np.zeros((x.shape[0], 2))
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def knn_label_agreement(coords: np.ndarray, labels, k: int = 5) -> float:
    """Leave-one-out k-NN majority-vote agreement with the true labels."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    n = coords.shape[0]
    if n < k + 1:
        raise ValueError(f"need more than k={k} points")
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    hits = 0
    for i in range(n):
        nn = np.argsort(d2[i], kind="stable")[:k]
        votes, counts = np.unique(labels[nn], return_counts=True)
        hits += votes[counts.argmax()] == labels[i]
    return hits / n


def write_projection_csv(path, ids, labels, coords) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "x", "y"])
        for i, lab, (x, y) in zip(ids, labels, coords):
            w.writerow([i, lab, f"{x:.10g}", f"{y:.10g}"])


def write_matrix_csv(path, matrix: np.ndarray, row_labels=None) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(matrix):
            label = [row_labels[i]] if row_labels is not None else []
            w.writerow(label + [f"{v:.10g}" for v in row])


def write_ppm_heatmap(path, matrix: np.ndarray) -> None:
    """Render a matrix as a binary PPM image (dark = low, warm = high)."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    unit = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    r = np.clip(3.0 * unit, 0, 1)
    g = np.clip(3.0 * unit - 1.0, 0, 1)
    b = np.clip(3.0 * unit - 2.0, 0, 1)
    img = (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    scale = max(1, 256 // max(m.shape[0], 1))
    img = np.repeat(np.repeat(img, scale, axis=0), 2, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P6 {img.shape[1]} {img.shape[0]} 255\n".encode())
        fh.write(img.tobytes())


def write_rows_csv(path: Path | str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
