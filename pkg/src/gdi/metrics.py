"""Normalized Atari-style scores, aggregation with missing entries, and score-table IO."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

HEADER = ("game", "random", "human_avg", "hwr", "score")
REPORT_HEADER = ("game", "hns", "hwrns", "saber")
FRAMES_PER_DAY = 108000 * 2 * 24
SABER_CAP = 200.0
MISSING = "NA"


def _ratio(raw: float, random: float, baseline: float) -> float:
    if baseline == random:
        raise ZeroDivisionError("baseline equals the random score")
    return 100.0 * (raw - random) / (baseline - random)


def hns(raw: float, random: float, human_avg: float) -> float:
    return _ratio(raw, random, human_avg)


def hwrns(raw: float, random: float, hwr: float) -> float:
    return _ratio(raw, random, hwr)


def saber(hwrns_percent: float) -> float:
    return min(max(hwrns_percent, 0.0), SABER_CAP)


def _present(values: Iterable[Optional[float]]) -> np.ndarray:
    return np.array([v for v in values if v is not None and not math.isnan(v)], dtype=float)


def aggregate(values: Iterable[Optional[float]]):
    """``(mean, median)`` over the present entries; ``None``/NaN are skipped."""
    v = _present(values)
    if len(v) == 0:
        raise ValueError("no present values to aggregate")
    return float(v.mean()), float(np.median(v))


def hwrb(hwrns_values: Iterable[Optional[float]]) -> int:
    return int((_present(hwrns_values) >= 100.0).sum())


def playtime_days(frames: float) -> float:
    return frames / FRAMES_PER_DAY


def learning_efficiency(metric: float, frames: float) -> float:
    if frames <= 0:
        raise ValueError("frames must be positive")
    return metric / frames


@dataclass(frozen=True)
class GameRow:
    game: str
    random: float
    human_avg: float
    hwr: float
    score: Optional[float]


@dataclass
class ScoreTable:
    rows: Dict[str, GameRow]

    def __len__(self):
        return len(self.rows)

    def games(self):
        return list(self.rows)

    def per_game(self) -> Dict[str, dict]:
        out = {}
        for name, r in self.rows.items():
            if r.score is None:
                out[name] = {"hns": None, "hwrns": None, "saber": None}
                continue
            w = hwrns(r.score, r.random, r.hwr)
            out[name] = {"hns": hns(r.score, r.random, r.human_avg), "hwrns": w, "saber": saber(w)}
        return out

    def summary(self) -> dict:
        cells = self.per_game().values()
        col = {k: [c[k] for c in cells] for k in ("hns", "hwrns", "saber")}
        out = {}
        for k, vals in col.items():
            out[f"mean_{k}"], out[f"median_{k}"] = aggregate(vals)
        out["hwrb"] = hwrb(col["hwrns"])
        out["games"] = len(_present(col["hns"]))
        return out


def _parse_float(text: str, field: str, line: int, allow_missing: bool) -> Optional[float]:
    text = text.strip()
    if text == MISSING:
        if allow_missing:
            return None
        raise ValueError(f"line {line}: {field} may not be {MISSING}")
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"line {line}: cannot parse {field}={text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"line {line}: {field} must be finite")
    return value


def load_score_table(path) -> ScoreTable:
    """Read ``game,random,human_avg,hwr,score``; ``NA`` marks a missing score."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty score table") from None
        if tuple(h.strip() for h in header) != HEADER:
            raise ValueError(f"{path}: header must be {','.join(HEADER)}")
        rows: Dict[str, GameRow] = {}
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(HEADER):
                raise ValueError(f"line {line}: expected {len(HEADER)} fields, got {len(rec)}")
            game = rec[0].strip()
            if not game:
                raise ValueError(f"line {line}: empty game name")
            if game in rows:
                raise ValueError(f"line {line}: duplicate game {game!r}")
            rnd, hum, rec_ = (_parse_float(rec[i], HEADER[i], line, False) for i in (1, 2, 3))
            if hum == rnd or rec_ == rnd:
                raise ValueError(f"line {line}: baseline equals random score for {game!r}")
            rows[game] = GameRow(game, rnd, hum, rec_, _parse_float(rec[4], "score", line, True))
    if not rows:
        raise ValueError(f"{path}: no game rows")
    return ScoreTable(rows)


def bundled_table_path(name: str) -> Path:
    """Path of a bundled fixture (``gdi_i3`` or ``gdi_h3``)."""
    return Path(str(resources.files("gdi") / "data" / f"{name}.csv"))


def write_report(table: ScoreTable, path) -> dict:
    """Per-game CSV rounded to 2 decimals plus a trailing summary row."""
    cells = table.per_game()
    summary = table.summary()
    fmt = lambda v: MISSING if v is None else f"{v:.2f}"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for game, c in cells.items():
            w.writerow([game, fmt(c["hns"]), fmt(c["hwrns"]), fmt(c["saber"])])
        w.writerow(["MEAN", fmt(summary["mean_hns"]), fmt(summary["mean_hwrns"]), fmt(summary["mean_saber"])])
    return summary
