"""Influence scoring in the projected gradient space.

The inverse-Hessian product is applied once per test gradient and the result
is dotted against train gradients, which may come from memory or be streamed
batch by batch from a gradient store.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, ZeroSelfInfluenceError
from .numerics import solve_damped
from .stats import ProjectedHessian

MODES = ("dot", "influence", "l_relatif", "cosine")


@dataclass
class ScoreMatrix:
    test_ids: np.ndarray
    train_ids: np.ndarray
    scores: np.ndarray  # (n_test, n_train)
    mode: str

    def __post_init__(self):
        if self.scores.shape != (len(self.test_ids), len(self.train_ids)):
            raise DimensionError(
                f"scores {self.scores.shape} vs ids ({len(self.test_ids)}, {len(self.train_ids)})"
            )


def ihvp(h: ProjectedHessian, g) -> np.ndarray:
    """``(H + lambda I)^{-1} g`` block by block; ``g`` is ``(k,)`` or ``(m, k)``."""
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 1
    rows = g[None] if single else g
    if rows.shape[1] != h.dim:
        raise DimensionError(f"gradient width {rows.shape[1]} vs Hessian dim {h.dim}")
    out = np.empty_like(rows)
    for b in h.blocks:
        part = slice(b.offset, b.offset + b.dim)
        out[:, part] = solve_damped(b.eig, b.damping, rows[:, part].T).T
    return out[0] if single else out


def _precondition(h: ProjectedHessian | None, g: np.ndarray, mode: str) -> np.ndarray:
    if mode == "dot" or h is None:
        return g
    return ihvp(h, g)


def self_influences(grads, h: ProjectedHessian | None, mode: str = "influence") -> np.ndarray:
    """``g^T (H + lambda I)^{-1} g`` for each row; plain ``g^T g`` in dot mode."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    return np.einsum("ij,ij->i", grads, _precondition(h, grads, mode))


def self_influence(g, h: ProjectedHessian | None) -> float:
    return float(self_influences(np.asarray(g)[None], h)[0])


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _normalizer(selfs: np.ndarray, ids: np.ndarray, side: str) -> np.ndarray:
    bad = np.flatnonzero(~(selfs > 0))
    if bad.size:
        raise ZeroSelfInfluenceError(_plain(ids[bad[0]]), side)
    return np.sqrt(selfs)


def _plain(x):
    return x.item() if isinstance(x, np.generic) else x


def _score_block(pre_test, test_norm, train_ids, train_grads, h, mode):
    raw = pre_test @ train_grads.T
    if mode in ("l_relatif", "cosine"):
        norm = _normalizer(self_influences(train_grads, h, mode), train_ids, "train")
        raw = raw / norm[None, :]
        if mode == "cosine":
            raw = raw / test_norm[:, None]
    return raw


def _default_ids(ids, n):
    return np.arange(n) if ids is None else np.asarray(ids)


def score(
    test_grads,
    train_grads,
    h: ProjectedHessian | None,
    mode: str = "influence",
    test_ids=None,
    train_ids=None,
) -> ScoreMatrix:
    """Pairwise scores between in-memory test and train gradients.

    ``dot`` ignores ``h``; ``l_relatif`` divides each train column by the root
    of that example's self-influence; ``cosine`` also divides each test row.
    """
    return score_stream(
        test_grads, [(_default_ids(train_ids, len(train_grads)), train_grads)], h, mode, test_ids
    )


def score_stream(
    test_grads,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    h: ProjectedHessian | None,
    mode: str = "influence",
    test_ids=None,
    workers: int = 1,
) -> ScoreMatrix:
    """Score test gradients against ``(ids, grads)`` train batches.

    Batches are reduced in arrival order whatever ``workers`` is, so results
    are bitwise identical for any worker count.
    """
    _check_mode(mode)
    test = np.atleast_2d(np.asarray(test_grads, dtype=np.float64))
    test_ids = _default_ids(test_ids, len(test))
    if mode != "dot" and h is not None and test.shape[1] != h.dim:
        raise DimensionError(f"test gradient width {test.shape[1]} vs Hessian dim {h.dim}")
    pre_test = _precondition(h, test, mode)
    test_norm = None
    if mode == "cosine":
        test_norm = _normalizer(np.einsum("ij,ij->i", test, pre_test), test_ids, "test")

    def work(batch):
        ids, grads = batch
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape[1] != test.shape[1]:
            raise DimensionError(f"train gradient width {grads.shape[1]} vs {test.shape[1]}")
        return np.asarray(ids), _score_block(pre_test, test_norm, np.asarray(ids), grads, h, mode)

    if workers <= 1:
        results = [work(b) for b in batches]
    else:
        results = []
        window = []
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for b in batches:
                window.append(pool.submit(work, b))
                if len(window) >= 2 * workers:
                    results.append(window.pop(0).result())
            results.extend(f.result() for f in window)
    if results:
        train_ids = np.concatenate([r[0] for r in results])
        scores = np.concatenate([r[1] for r in results], axis=1)
    else:
        train_ids = np.empty(0, dtype=np.int64)
        scores = np.empty((len(test), 0))
    return ScoreMatrix(test_ids, train_ids, scores, mode)


def topk(scores: ScoreMatrix, k: int) -> list[list[tuple[int, float]]]:
    """Per test row, the ``k`` best ``(train_id, score)`` pairs.

    Ties are broken by ascending train id.
    """
    n_train = len(scores.train_ids)
    if k < 0 or k > n_train:
        raise ValueError(f"k={k} exceeds the {n_train} available train examples")
    ids = np.asarray(scores.train_ids)
    out = []
    for row in scores.scores:
        order = np.lexsort((ids, -row))[:k]
        out.append([(_plain(ids[j]), float(row[j])) for j in order])
    return out


REPORT_FIELDS = ("test_id", "rank", "train_id", "score", "mode")


def report_rows(scores: ScoreMatrix, k: int):
    for test_id, ranked in zip(scores.test_ids, topk(scores, k)):
        for rank, (train_id, value) in enumerate(ranked, start=1):
            yield (_plain(test_id), rank, train_id, repr(float(value)), scores.mode)


def write_report(scores: ScoreMatrix, k: int, dest=None, delimiter: str = ",") -> str:
    """Write ``test_id, rank, train_id, score, mode`` rows; returns the text.

    Scores use Python's shortest round-trip float repr.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    writer.writerows(report_rows(scores, k))
    text = buf.getvalue()
    if dest is not None:
        Path(dest).write_text(text)
    return text


def read_report(text: str, delimiter: str = ",") -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text), delimiter=delimiter):
        rows.append(
            {
                "test_id": int(row["test_id"]),
                "rank": int(row["rank"]),
                "train_id": int(row["train_id"]),
                "score": float(row["score"]),
                "mode": row["mode"],
            }
        )
    return rows
