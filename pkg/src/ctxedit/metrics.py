"""Evaluation kernels: pixel distances, embedding similarities, the
direction score, face-similarity effective score, and text metrics.

Embedders are pluggable; the toy defaults (pooled pixels for images,
hashed token counts for text) keep every metric runnable without any
pretrained network.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np


class MetricError(ValueError):
    pass


# -- pixel metrics ------------------------------------------------------------


def pixel_distances(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(L1, L2) between two [0,1] images of identical shape.

    L1 is the mean absolute difference; L2 is the root of the mean squared
    difference so both satisfy the metric axioms (the squared mean would
    break the triangle inequality).
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.abs(diff).mean()), float(math.sqrt((diff * diff).mean()))


# -- embedders ----------------------------------------------------------------


class Embedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    # a constant tail component keeps the vector nonzero before normalizing
    v = np.concatenate([np.asarray(v, dtype=np.float64).ravel(), [1.0]])
    return v / np.linalg.norm(v)


@dataclass
class ToyEmbedder:
    """Downsample-and-flatten for images, hashed token counts for text."""

    image_grid: int = 4
    text_dim: int = 64

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        h, w, c = img.shape
        g = self.image_grid
        rows = np.array_split(np.arange(h), g)
        cols = np.array_split(np.arange(w), g)
        pooled = np.empty((g, g, c))
        for i, rr in enumerate(rows):
            for j, cc in enumerate(cols):
                pooled[i, j] = img[np.ix_(rr, cc)].mean(axis=(0, 1))
        return _unit(pooled)

    def embed_text(self, text: str) -> np.ndarray:
        counts = np.zeros(self.text_dim)
        for token in text.lower().split():
            digest = hashlib.sha1(token.encode("utf-8")).digest()
            counts[int.from_bytes(digest[:4], "big") % self.text_dim] += 1.0
        return _unit(counts)


def embedding_similarity(a: np.ndarray, b: np.ndarray, embedder: Embedder) -> float:
    """Cosine similarity of two image embeddings, in [-1, 1]."""
    va, vb = embedder.embed_image(a), embedder.embed_image(b)
    return float(np.clip(np.dot(va, vb), -1.0, 1.0))


def direction_similarity(
    img_src: np.ndarray,
    img_out: np.ndarray,
    txt_src: str,
    txt_out: str,
    embedder: Embedder,
) -> Optional[float]:
    """Cosine between the image-embedding delta and the text-embedding
    delta.  Returns None when either delta is zero (undefined); callers
    exclude those samples from aggregates."""
    di = embedder.embed_image(img_out) - embedder.embed_image(img_src)
    dt = embedder.embed_text(txt_out) - embedder.embed_text(txt_src)
    ni, nt = np.linalg.norm(di), np.linalg.norm(dt)
    if ni == 0.0 or nt == 0.0:
        return None
    return float(np.clip(np.dot(di, dt) / (ni * nt), -1.0, 1.0))


# -- face similarity ----------------------------------------------------------


def effective_score_threshold(mean: float, std: float) -> float:
    return mean - std


def face_similarity_es(
    scores: Sequence[float], mean: float, std: float
) -> tuple[float, float]:
    """(mean score, fraction of scores strictly above mean - std)."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise MetricError("no scores given")
    threshold = effective_score_threshold(mean, std)
    return float(values.mean()), float((values > threshold).mean())


# -- text metrics -------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    """1 - lev/max(|a|,|b|): higher is better; two empty strings score 1."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def text_metrics(predicted: Sequence[str], reference: Sequence[str]) -> tuple[float, float]:
    """(sentence accuracy, mean normalized edit distance) over aligned lines."""
    if len(predicted) != len(reference):
        raise MetricError("predicted and reference line counts differ")
    if not predicted:
        raise MetricError("no lines to score")
    acc = float(np.mean([p == r for p, r in zip(predicted, reference)]))
    ned = float(np.mean([normalized_edit_distance(p, r) for p, r in zip(predicted, reference)]))
    return acc, ned


# -- report -------------------------------------------------------------------

REPORT_COLUMNS = ("sample", "l1", "l2", "embedding_similarity")


@dataclass
class MetricReport:
    """Per-sample rows plus aggregate means (means of the per-sample values)."""

    rows: list[dict] = field(default_factory=list)

    def add(self, sample: str, l1: float, l2: float, cosine: float) -> None:
        self.rows.append(
            {"sample": sample, "l1": l1, "l2": l2, "embedding_similarity": cosine}
        )

    def aggregate(self) -> dict:
        if not self.rows:
            raise MetricError("empty report")
        return {
            "sample": "mean",
            "l1": float(np.mean([r["l1"] for r in self.rows])),
            "l2": float(np.mean([r["l2"] for r in self.rows])),
            "embedding_similarity": float(
                np.mean([r["embedding_similarity"] for r in self.rows])
            ),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            writer.writerow(self.aggregate())


def compare_directories(pred_dir, ref_dir, embedder: Optional[Embedder] = None) -> MetricReport:
    """Score same-named images from two directories."""
    from .imageio import load_image

    embedder = embedder or ToyEmbedder()
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    report = MetricReport()
    names = sorted(
        p.name for p in pred_dir.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")
    )
    if not names:
        raise MetricError(f"no images found in {pred_dir}")
    for name in names:
        ref_path = ref_dir / name
        if not ref_path.exists():
            raise MetricError(f"missing reference image {ref_path}")
        pred = load_image(pred_dir / name)
        ref = load_image(ref_path)
        l1, l2 = pixel_distances(pred, ref)
        cos = embedding_similarity(pred, ref, embedder)
        report.add(name, l1, l2, cos)
    return report
