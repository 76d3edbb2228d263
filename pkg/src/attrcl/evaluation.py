"""Retrieval mAP, the A/(B) forgetting report, and attention-map export."""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import Dataset


def average_precision(relevance) -> float:
    """Non-interpolated AP of a ranked list of 0/1 relevance flags."""
    rel = np.asarray(relevance, dtype=bool)
    if rel.size == 0:
        raise ValueError("empty ranking")
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    # exact rational sum, rounded once: [1, 0, 1] gives exactly 5/6
    total = sum(Fraction(k, int(pos) + 1) for k, pos in enumerate(hits, start=1))
    return float(total / hits.size)


@dataclass
class QueryResult:
    query: str
    attribute: str
    ranking: list[str]
    relevance: list[bool]

    @property
    def ap(self) -> float:
        return average_precision(self.relevance)


def rank_gallery(embeddings: np.ndarray, ids: list[str], labels: list[str],
                 attribute: str = "") -> list[QueryResult]:
    """Each row queries all other rows by descending cosine similarity;
    ties break by ascending item id."""
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    e = e / norms
    sims = e @ e.T
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object)))
    labels = np.asarray(labels, dtype=object)
    results = []
    for q in range(len(ids)):
        others = np.delete(np.arange(len(ids)), q)
        order = others[np.lexsort((id_rank[others], -sims[q, others]))]
        results.append(QueryResult(ids[q], attribute, [ids[i] for i in order],
                                   list(labels[order] == labels[q])))
    return results


def map_from_embeddings(embeddings, ids, labels) -> float:
    results = rank_gallery(embeddings, list(ids), list(labels))
    return float(np.mean([r.ap for r in results]))


def map_for_attribute(model, dataset: Dataset, attribute: str, max_items: int | None = None,
                      use_teacher: bool = False) -> float:
    """mAP in [0, 1]; every carrier of ``attribute`` queries all other carriers."""
    items = dataset.carriers(attribute)
    if max_items is not None:
        items = items[:max_items]
    if len(items) < 2:
        raise ValueError(f"need at least two items carrying {attribute!r}")
    ids = [it.id for it in items]
    emb = model.embed(dataset.images_for(ids), attribute, use_teacher=use_teacher)
    return map_from_embeddings(emb, ids, [it.labels[attribute] for it in items])


@dataclass
class ReportRow:
    attribute: str
    b: float
    a: float

    @property
    def delta(self) -> float:
        return self.b - self.a


@dataclass
class RetrievalReport:
    """Per-attribute mAP (x100) just after its task (B) and after the last task (A)."""
    rows: list[ReportRow] = field(default_factory=list)
    method: str = ""

    def __post_init__(self):
        for r in self.rows:
            if not (0.0 <= r.a <= 100.0 and 0.0 <= r.b <= 100.0):
                raise ValueError(f"mAP out of range for {r.attribute!r}")

    @property
    def mean_a(self) -> float:
        return float(np.mean([r.a for r in self.rows]))

    @property
    def mean_b(self) -> float:
        return float(np.mean([r.b for r in self.rows]))

    @property
    def mean_forgetting(self) -> float:
        return float(np.mean([r.delta for r in self.rows]))

    def cell(self, row: ReportRow) -> str:
        return f"{row.a:.2f},({row.b:.2f})"

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attribute", "B", "A", "delta"])
        for r in self.rows:
            w.writerow([r.attribute, f"{r.b:.6f}", f"{r.a:.6f}", f"{r.delta:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, method: str = "") -> "RetrievalReport":
        p = Path(path_or_text) if not str(path_or_text).startswith("attribute,") else None
        text = p.read_text() if p is not None else str(path_or_text)
        rows = [ReportRow(rec["attribute"], float(rec["B"]), float(rec["A"]))
                for rec in csv.DictReader(io.StringIO(text))]
        return cls(rows, method)

    def render(self) -> str:
        names = [r.attribute for r in self.rows] + ["mean"]
        cells = [self.cell(r) for r in self.rows] + [f"{self.mean_a:.2f},({self.mean_b:.2f})"]
        widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
        label = self.method or "method"
        lw = max(len(label), 6)
        head = " | ".join([" " * lw] + [n.rjust(w) for n, w in zip(names, widths)])
        body = " | ".join([label.ljust(lw)] + [c.rjust(w) for c, w in zip(cells, widths)])
        return f"{head}\n{'-' * len(head)}\n{body}\n"


def forgetting_report(history, dataset: Dataset, max_items: int | None = None,
                      use_teacher: bool = False) -> RetrievalReport:
    """B from each task's own snapshot, A from the final snapshot."""
    if history.final is None:
        raise ValueError("history has no final snapshot")
    rows = []
    for i, attr in enumerate(history.order):
        if i not in history.snapshots:
            raise ValueError(f"missing snapshot for task {i} ({attr})")
        snap = history.snapshots[i]
        b = 100.0 * map_for_attribute(snap, dataset, attr, max_items, use_teacher)
        if snap is history.final:
            a = b
        else:
            a = 100.0 * map_for_attribute(history.final, dataset, attr, max_items, use_teacher)
        rows.append(ReportRow(attr, b, a))
    return RetrievalReport(rows, history.method)


def export_attention_map(model, image: np.ndarray, attribute: str, path) -> np.ndarray:
    """Write ``<path>.png`` (min-max scaled, upsampled to image size) and
    ``<path>.txt`` (raw weights). Returns the raw h x w map."""
    _, amap = model.embed(np.asarray(image)[None], attribute, return_attention=True)
    weights = amap[0].astype(np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path.with_suffix(".txt"), weights, fmt="%.10g")
    lo, hi = weights.min(), weights.max()
    scaled = np.zeros_like(weights) if hi == lo else (weights - lo) / (hi - lo)
    gray = np.rint(scaled * 255).astype(np.uint8)
    h, w = np.asarray(image).shape[:2]
    Image.fromarray(gray, mode="L").resize((w, h), Image.NEAREST).save(path.with_suffix(".png"))
    return weights
