"""Tracking evaluation: centre-distance matching, MOTA/recall/IDSW, AMOTA/AMOTP sweeps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidArgument


@dataclass
class EvalFrame:
    gt: list  # dicts with "id", "center"
    pred: list  # dicts with "id", "center", "score"

    def __post_init__(self):
        for side, items in (("gt", self.gt), ("pred", self.pred)):
            ids = [int(b["id"]) for b in items]
            if len(set(ids)) != len(ids):
                raise InvalidArgument(f"duplicate {side} ids in one frame")


@dataclass
class Counts:
    gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    dist_sum: float = 0.0
    per_frame: list = field(default_factory=list)

    def add(self, other: "Counts"):
        self.gt += other.gt
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.idsw += other.idsw
        self.dist_sum += other.dist_sum


def match_frame(gt, pred, radius: float = 2.0):
    """Greedy nearest-centre matching within ``radius``.

    Returns (matches, fp, fn): matches are (gt index, pred index, distance);
    fp/fn are unmatched pred/gt indices. Ties go to the smaller distance,
    then lower gt id, then lower pred id.
    """
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    cand = []
    for i, g in enumerate(gt):
        cg = np.asarray(g["center"], dtype=float)
        for j, p in enumerate(pred):
            d = float(np.linalg.norm(cg - np.asarray(p["center"], dtype=float)))
            if d <= radius:
                cand.append((d, int(g["id"]), int(p["id"]), i, j))
    cand.sort()
    used_g, used_p, matches = set(), set(), []
    for d, _, _, i, j in cand:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        matches.append((i, j, d))
    fp = [j for j in range(len(pred)) if j not in used_p]
    fn = [i for i in range(len(gt)) if i not in used_g]
    return matches, fp, fn


def sequence_counts(frames, radius: float = 2.0, threshold: float = -np.inf) -> Counts:
    """Accumulate TP/FP/FN/IDSW over a sequence, ignoring preds scored below ``threshold``."""
    c = Counts()
    last = {}  # gt id -> pred id at its most recent match
    for fr in frames:
        pred = [p for p in fr.pred if p.get("score", 1.0) >= threshold]
        matches, fp, fn = match_frame(fr.gt, pred, radius)
        sw = 0
        for i, j, d in matches:
            gid, pid = int(fr.gt[i]["id"]), int(pred[j]["id"])
            if gid in last and last[gid] != pid:
                sw += 1
            last[gid] = pid
            c.dist_sum += d
        c.gt += len(fr.gt)
        c.tp += len(matches)
        c.fp += len(fp)
        c.fn += len(fn)
        c.idsw += sw
        c.per_frame.append({"tp": len(matches), "fp": len(fp), "fn": len(fn), "idsw": sw})
    return c


def _pooled(sequences, radius, threshold=-np.inf) -> Counts:
    total = Counts()
    for frames in sequences:
        total.add(sequence_counts(frames, radius, threshold))
    return total


def _as_sequences(frames_or_sequences):
    if frames_or_sequences and isinstance(frames_or_sequences[0], EvalFrame):
        return [frames_or_sequences]
    return list(frames_or_sequences)


def mota_and_recall(frames, radius: float = 2.0) -> dict:
    """MOTA = 1 - (FP + FN + IDSW) / GT, recall = TP / GT, plus raw counts."""
    c = _pooled(_as_sequences(frames), radius)
    if c.gt == 0:
        raise InvalidArgument("no ground-truth objects to evaluate against")
    return {
        "mota": 1.0 - (c.fp + c.fn + c.idsw) / c.gt,
        "recall": c.tp / c.gt,
        "idsw": c.idsw,
        "fp": c.fp,
        "fn": c.fn,
        "tp": c.tp,
        "gt": c.gt,
        "motp": c.dist_sum / c.tp if c.tp else float("nan"),
    }


def _thresholds(sequences):
    scores = sorted({float(p.get("score", 1.0)) for frames in sequences for fr in frames for p in fr.pred},
                    reverse=True)
    return scores


def recall_sweep(frames, radius: float = 2.0):
    """(threshold, Counts) for every distinct prediction score, highest first."""
    seqs = _as_sequences(frames)
    return [(t, _pooled(seqs, radius, t)) for t in _thresholds(seqs)]


def amota_amotp(frames, n_thresholds: int = 40, radius: float = 2.0) -> dict:
    """Recall-normalised sweep.

    For each recall target r = i / n (i = 1..n) the highest confidence
    threshold whose recall reaches r is used;
    MOTAR_r = max(0, 1 - (FP + FN + IDSW - (1 - r) GT) / (r GT)).
    Targets no threshold reaches contribute MOTAR 0 and MOTP = radius.
    """
    seqs = _as_sequences(frames)
    gt = sum(len(fr.gt) for f in seqs for fr in f)
    if gt == 0:
        raise InvalidArgument("no ground-truth objects to evaluate against")
    sweep = recall_sweep(seqs, radius)
    points = []
    for i in range(1, n_thresholds + 1):
        r = i / n_thresholds
        hit = next(((t, c) for t, c in sweep if c.tp / gt >= r - 1e-12), None)
        if hit is None:
            points.append({"target": r, "threshold": None, "motar": 0.0, "motp": radius})
            continue
        t, c = hit
        motar = 1.0 - (c.fp + c.fn + c.idsw - (1.0 - r) * gt) / (r * gt)
        points.append({"target": r, "threshold": t, "motar": float(min(max(motar, 0.0), 1.0)),
                       "motp": c.dist_sum / c.tp if c.tp else radius})
    return {
        "amota": float(np.mean([p["motar"] for p in points])),
        "amotp": float(np.mean([p["motp"] for p in points])),
        "points": points,
    }


def evaluate(frames, radius: float = 2.0, n_thresholds: int = 40) -> dict:
    base = mota_and_recall(frames, radius)
    sweep = amota_amotp(frames, n_thresholds, radius)
    return {"mota": base["mota"], "amota": sweep["amota"], "amotp": sweep["amotp"],
            "recall": base["recall"], "idsw": base["idsw"], "fp": base["fp"], "fn": base["fn"],
            "tp": base["tp"], "gt": base["gt"], "motp": base["motp"]}


def report(per_sequence: dict, radius: float = 2.0, n_thresholds: int = 40):
    """Per-sequence and pooled metrics. ``per_sequence`` maps name -> list of EvalFrame.

    Returns (report dict, aligned text table).
    """
    rows = {name: evaluate(frames, radius, n_thresholds) for name, frames in per_sequence.items()}
    agg = evaluate(list(per_sequence.values()), radius, n_thresholds) if per_sequence else {}
    out = {"radius": radius, "n_thresholds": n_thresholds, "sequences": rows, "aggregate": agg}
    return out, format_table({**rows, "ALL": agg} if agg else rows)


COLUMNS = ("amota", "amotp", "mota", "recall", "idsw", "fp", "fn", "gt")


def format_table(rows: dict) -> str:
    names = list(rows)
    width = max([len("sequence")] + [len(n) for n in names])
    head = "sequence".ljust(width) + "".join(c.upper().rjust(9) for c in COLUMNS)
    lines = [head, "-" * len(head)]
    for n in names:
        r = rows[n]
        cells = []
        for c in COLUMNS:
            v = r.get(c, float("nan"))
            cells.append(("%9d" % v) if isinstance(v, (int, np.integer)) else ("%9.4f" % v))
        lines.append(n.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def dumps_report(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True, allow_nan=True) + "\n"
