"""Per-source evaluation reports (accuracy and AP, plus an unweighted mean)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DEFAULT_CROP, DatasetError, FeatureDataset, load_source, source_dirs
from .metrics import ScoredSet, accuracy, average_precision
from .nn.train import predict_scores
from .npr import GridSpec
from .synthgen import manifest_hash

logger = logging.getLogger(__name__)

COLUMNS = ("Source", "N_real", "N_fake", "Acc", "AP")


@dataclass
class ReportRow:
    source: str
    n_real: int
    n_fake: int
    acc: float
    ap: float
    valid: bool = True
    note: str = ""


@dataclass
class EvalReport:
    rows: list
    meta: dict = field(default_factory=dict)

    @property
    def valid_rows(self):
        return [r for r in self.rows if r.valid]

    @property
    def mean(self) -> ReportRow:
        """Unweighted mean over valid sources (NaN when there are none)."""
        ok = self.valid_rows
        acc = float(np.mean([r.acc for r in ok])) if ok else math.nan
        ap = float(np.mean([r.ap for r in ok])) if ok else math.nan
        return ReportRow("Mean", sum(r.n_real for r in ok), sum(r.n_fake for r in ok), acc, ap)

    def row(self, source: str) -> ReportRow:
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)

    def _table(self):
        out = []
        for r in self.rows + [self.mean]:
            acc = f"{r.acc:.2f}" if r.valid else "invalid"
            ap = f"{r.ap:.2f}" if r.valid else "invalid"
            out.append((r.source, str(r.n_real), str(r.n_fake), acc, ap))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(self._table())
        return buf.getvalue()

    def to_text(self) -> str:
        table = [COLUMNS] + self._table()
        widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
        lines = []
        for k, row in enumerate(table):
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells))
            if k == 0 or k == len(table) - 2:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        def row_dict(r):
            return {"source": r.source, "n_real": r.n_real, "n_fake": r.n_fake,
                    "acc": r.acc if r.valid else None, "ap": r.ap if r.valid else None,
                    "valid": r.valid, "note": r.note}
        return {"rows": [row_dict(r) for r in self.rows], "mean": row_dict(self.mean), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str = "report") -> dict:
        """Write ``<stem>.csv``, ``<stem>.txt`` and ``<stem>.json``; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {ext: out_dir / f"{stem}.{ext}" for ext in ("csv", "txt", "json")}
        paths["csv"].write_text(self.to_csv())
        paths["txt"].write_text(self.to_text())
        paths["json"].write_text(self.to_json())
        return paths


def score_row(scored: ScoredSet, threshold: float = 0.5) -> ReportRow:
    labels = scored.labels
    n_fake = int(labels.sum())
    n_real = int(len(labels) - n_fake)
    return ReportRow(scored.source_name, n_real, n_fake,
                     accuracy(scored.scores, labels, threshold), average_precision(scored.scores, labels))


def score_source(model, samples, grid: GridSpec, *, crop: int = DEFAULT_CROP,
                 representation: str = "npr", jobs: int = 1) -> ScoredSet:
    ds = FeatureDataset(samples, grid, crop=crop, representation=representation, jobs=jobs)
    scores, labels = predict_scores(model, ds)
    return ScoredSet(scores, labels, samples[0].source_name)


def evaluate_sources(model, corpus_root, grid: GridSpec = GridSpec(), *, crop: int = DEFAULT_CROP,
                     representation: str = "npr", jobs: int = 1, meta=None) -> EvalReport:
    """Center-crop every image of every source, score it and tabulate.

    A source lacking one of the two classes is kept as an invalid row and
    left out of the mean.
    """
    rows = []
    for sdir in source_dirs(corpus_root):
        try:
            samples = load_source(sdir)
        except DatasetError as exc:
            warnings.warn(f"source {sdir.name} excluded from the mean: {exc}", stacklevel=2)
            n_real = _count_images(sdir / "0_real")
            n_fake = _count_images(sdir / "1_fake")
            rows.append(ReportRow(sdir.name, n_real, n_fake, math.nan, math.nan, False, str(exc)))
            continue
        row = score_row(score_source(model, samples, grid, crop=crop,
                                     representation=representation, jobs=jobs))
        logger.info("%s: acc %.2f ap %.2f", row.source, row.acc, row.ap)
        rows.append(row)
    if not rows:
        raise DatasetError(f"{corpus_root} contains no sources")
    info = {"grid": grid.describe(), "crop": crop, "representation": representation,
            "corpus_manifest_sha256": manifest_hash(corpus_root)}
    info.update(meta or {})
    return EvalReport(rows, info)


def _count_images(d: Path) -> int:
    if not d.is_dir():
        return 0
    return sum(1 for p in d.iterdir() if p.is_file())
