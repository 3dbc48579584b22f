"""Image-, patient-, patch- and vote-level metrics plus cross-magnification analyses."""
from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import MAGNIFICATIONS, MagnificationFactor
from .errors import EmptyPredictions, IncompleteMatrix, NoPatches

SCORE_TOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    specimen_id: str
    patient_id: str
    magnification: MagnificationFactor | None
    true_label: int
    predicted_label: int
    class_scores: tuple[float, ...]
    patch_coord: tuple[int, int] | None = None

    def __post_init__(self):
        scores = np.asarray(self.class_scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise ValueError("class_scores must be a non-empty vector")
        if abs(scores.sum() - 1.0) > SCORE_TOL:
            raise ValueError(f"class_scores sum to {scores.sum()}, expected 1")
        # any tie rule is allowed, but the label must be one of the maxima
        if not 0 <= self.predicted_label < scores.size or scores[self.predicted_label] < scores.max():
            raise ValueError("predicted_label is not an argmax of class_scores")
        object.__setattr__(self, "class_scores", tuple(float(s) for s in scores))
        if self.magnification is not None:
            object.__setattr__(self, "magnification", MagnificationFactor(self.magnification))

    @property
    def correct(self) -> bool:
        return self.predicted_label == self.true_label

    @classmethod
    def from_scores(cls, specimen_id, patient_id, magnification, true_label, scores, patch_coord=None):
        """Record whose prediction is the argmax of ``scores`` (ties to the lowest class id)."""
        scores = np.asarray(scores, dtype=np.float64)
        return cls(specimen_id, patient_id, magnification, int(true_label), int(np.argmax(scores)),
                   tuple(scores), patch_coord)


@dataclass
class EvalReport:
    ila: float
    pla: float | None
    n_images: int
    n_patients: int
    fold: int | None = None
    patch_accuracy: float | None = None
    image_accuracy: float | None = None
    per_magnification: dict = field(default_factory=dict)  # MF -> {"ila", "pla"}
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {"ila": self.ila}
        for key in ("pla", "patch_accuracy", "image_accuracy"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["per_magnification"] = {str(int(k)): v for k, v in self.per_magnification.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        doc = dict(doc)
        doc["per_magnification"] = {
            MagnificationFactor(int(k)): v for k, v in doc.get("per_magnification", {}).items()
        }
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def image_level_accuracy(preds: Sequence[PredictionRecord]) -> float:
    if not preds:
        raise EmptyPredictions("no predictions")
    return sum(p.correct for p in preds) / len(preds)


def patient_level_accuracy(preds: Sequence[PredictionRecord]) -> float:
    """Unweighted mean over patients of each patient's fraction of correct images."""
    if not preds:
        raise EmptyPredictions("no predictions")
    hits, totals = defaultdict(int), defaultdict(int)
    for p in preds:
        totals[p.patient_id] += 1
        hits[p.patient_id] += p.correct
    return sum(hits[pid] / totals[pid] for pid in totals) / len(totals)


def majority_vote(patch_preds: Sequence[PredictionRecord]) -> tuple[int, PredictionRecord]:
    """Plurality label over one image's patches.

    Ties go to the label with the highest mean class score across the
    patches, then to the lowest class id. The returned image record carries
    the vote shares as its class scores.
    """
    if not patch_preds:
        raise NoPatches("no patch predictions for image")
    n_classes = len(patch_preds[0].class_scores)
    votes = Counter(p.predicted_label for p in patch_preds)
    top = max(votes.values())
    tied = [c for c in range(n_classes) if votes.get(c, 0) == top]
    mean_scores = np.mean([p.class_scores for p in patch_preds], axis=0)
    label = min(tied, key=lambda c: (-mean_scores[c], c))
    shares = tuple(votes.get(c, 0) / len(patch_preds) for c in range(n_classes))
    first = patch_preds[0]
    record = PredictionRecord(first.specimen_id, first.patient_id, first.magnification,
                              first.true_label, label, shares)
    return label, record


def group_patches(preds: Iterable[PredictionRecord]) -> dict:
    groups = defaultdict(list)
    for p in preds:
        groups[(p.specimen_id, p.magnification)].append(p)
    return groups


def build_report(preds: Sequence[PredictionRecord], fold: int | None = None, meta: dict | None = None) -> EvalReport:
    """Summarise predictions; patch-level records are first voted into image records."""
    if not preds:
        raise EmptyPredictions("no predictions")
    patch_accuracy = image_accuracy = None
    if any(p.patch_coord is not None for p in preds):
        patch_accuracy = image_level_accuracy(preds)
        images = [majority_vote(group)[1] for _, group in sorted(group_patches(preds).items(),
                                                                  key=lambda kv: (kv[0][0], kv[0][1] or 0))]
        image_accuracy = image_level_accuracy(images)
    else:
        images = list(preds)
    per_mf = {}
    for mf in MAGNIFICATIONS:
        subset = [p for p in images if p.magnification == mf]
        if subset:
            per_mf[mf] = {"ila": image_level_accuracy(subset), "pla": patient_level_accuracy(subset)}
    return EvalReport(
        ila=image_level_accuracy(images),
        pla=patient_level_accuracy(images),
        n_images=len(images),
        n_patients=len({p.patient_id for p in images}),
        fold=fold,
        patch_accuracy=patch_accuracy,
        image_accuracy=image_accuracy,
        per_magnification=per_mf,
        meta=dict(meta or {}),
    )


def aggregate(reports: Sequence[EvalReport], metrics=("ila", "pla")) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of each metric across reports."""
    out = {}
    for m in metrics:
        values = [r.metrics()[m] for r in reports if m in r.metrics()]
        if values:
            out[m] = (float(np.mean(values)), float(np.std(values)))
    return out


def _metrics_of(entry) -> dict[str, float]:
    if isinstance(entry, EvalReport):
        return entry.metrics()
    if isinstance(entry, Mapping):
        return {k: float(v) for k, v in entry.items()}
    return {"value": float(entry)}


def cross_magnification(matrix: Mapping, mode: str) -> dict:
    """Average a 4x4 (train MF, eval MF) result matrix, excluding the diagonal.

    ``type1``: per training magnification, mean over the other three
    evaluation magnifications. ``type2``: per evaluation magnification, mean
    over models trained on the other three. Cells may be reports, metric
    mappings or bare numbers (reported under ``"value"``).
    """
    if mode not in ("type1", "type2"):
        raise ValueError("mode must be 'type1' or 'type2'")
    cells = {(MagnificationFactor(a), MagnificationFactor(b)): _metrics_of(v) for (a, b), v in matrix.items()}
    missing = [(int(a), int(b)) for a in MAGNIFICATIONS for b in MAGNIFICATIONS if (a, b) not in cells]
    if missing:
        raise IncompleteMatrix(f"missing train/eval combinations: {missing}")
    out = {}
    for m in MAGNIFICATIONS:
        picked = [cells[(m, o) if mode == "type1" else (o, m)] for o in MAGNIFICATIONS if o != m]
        shared = set.intersection(*(set(c) for c in picked))
        out[m] = {k: float(np.mean([c[k] for c in picked])) for k in sorted(shared)}
    return out


def label_efficiency_sweep(fractions: Iterable[float], runner: Callable[[float], EvalReport],
                           csv_path=None, available: Iterable[float] | None = None) -> list[tuple[float, EvalReport]]:
    """Run ``runner`` once per label fraction, in ascending order.

    ``available`` (typically ``plan.label_fractions``) restricts the allowed
    fractions.
    """
    fractions = sorted({float(f) for f in fractions})
    if available is not None:
        allowed = {round(float(f), 6) for f in available}
        bad = [f for f in fractions if round(f, 6) not in allowed]
        if bad:
            raise ValueError(f"fractions {bad} are not in the split plan")
    table = [(f, runner(f)) for f in fractions]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "ila", "pla", "n_images", "n_patients"])
            for f, r in table:
                w.writerow([f"{f:.2f}", f"{r.ila:.6f}", "" if r.pla is None else f"{r.pla:.6f}",
                            r.n_images, r.n_patients])
    return table


# ----------------------------------------------------------------------------
# predictions file
# ----------------------------------------------------------------------------


def write_predictions(path, preds: Sequence[PredictionRecord]) -> None:
    n_classes = len(preds[0].class_scores) if preds else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["specimen_id", "patient_id", "magnification", "row", "col", "true_label",
                    "predicted_label"] + [f"score_{c}" for c in range(n_classes)])
        for p in preds:
            row, col = p.patch_coord if p.patch_coord is not None else ("", "")
            w.writerow([p.specimen_id, p.patient_id, "" if p.magnification is None else int(p.magnification),
                        row, col, p.true_label, p.predicted_label] + [repr(s) for s in p.class_scores])


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            scores = [float(v) for k, v in rec.items() if k.startswith("score_")]
            coord = (int(rec["row"]), int(rec["col"])) if rec["row"] != "" else None
            out.append(PredictionRecord(
                rec["specimen_id"], rec["patient_id"],
                int(rec["magnification"]) if rec["magnification"] else None,
                int(rec["true_label"]), int(rec["predicted_label"]), tuple(scores), coord,
            ))
    return out
