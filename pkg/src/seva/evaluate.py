"""Word error rate with per-severity breakdown and the matched-pairs
sentence-segment word error (MAPSSWE) significance test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .severity import SeverityLevel

ALPHA = 0.05
COLUMNS = ("VL", "L", "M", "H", "All")


def align_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a unit-cost Levenshtein alignment.

    The backtrace prefers a substitution, then a deletion, then an insertion
    whenever several moves reach the same cost.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=int)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), dl, ins


@dataclass
class UttScore:
    utt_id: str
    ref: str
    hyp: str | None
    sub: int
    dels: int
    ins: int
    severity: SeverityLevel | None = None
    tag: str = ""

    @property
    def n_ref(self) -> int:
        return len(self.ref.split())

    @property
    def errors(self) -> int:
        return self.sub + self.dels + self.ins


@dataclass
class ScoredResult:
    utterances: list[UttScore] = field(default_factory=list)

    def _select(self, group: str | None) -> list[UttScore]:
        if group in (None, "All"):
            return self.utterances
        lvl = SeverityLevel.parse(group)
        return [u for u in self.utterances if u.severity == lvl]

    def counts(self, group: str | None = None) -> tuple[int, int]:
        """(total errors, total reference words) for a severity group or all."""
        sel = self._select(group)
        return sum(u.errors for u in sel), sum(u.n_ref for u in sel)

    def wer(self, group: str | None = None) -> float:
        err, n = self.counts(group)
        return 100.0 * err / n if n else math.nan

    def breakdown(self) -> dict[str, float]:
        return {c: self.wer(c) for c in COLUMNS}

    def errors_by_utt(self) -> dict[str, int]:
        return {u.utt_id: u.errors for u in self.utterances}

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "severity", "ref", "hyp", "sub", "del", "ins", "n_ref", "tag"])
        for u in self.utterances:
            w.writerow([u.utt_id, "" if u.severity is None else u.severity.short, u.ref,
                        "" if u.hyp is None else u.hyp, u.sub, u.dels, u.ins, u.n_ref, u.tag])


def wer(refs: Mapping[str, str], hyps: Mapping[str, str],
        severities: Mapping[str, SeverityLevel | int] | None = None,
        missing: str = "delete", tags: Mapping[str, str] | None = None) -> ScoredResult:
    """Score hypotheses against references keyed by utterance id.

    A missing hypothesis counts as deleting every reference word, or raises
    ``KeyError`` when ``missing="error"``. Utterances are kept in sorted id order.
    """
    if missing not in ("delete", "error"):
        raise ValueError(f"missing must be 'delete' or 'error', got {missing!r}")
    out = []
    for utt in sorted(refs):
        ref = refs[utt]
        hyp = hyps.get(utt)
        if hyp is None and missing == "error":
            raise KeyError(f"no hypothesis for {utt}")
        s, d, i = align_counts(ref.split(), [] if hyp is None else hyp.split())
        sev = None
        if severities is not None and utt in severities:
            sev = SeverityLevel(int(severities[utt]))
        out.append(UttScore(utt, ref, hyp, s, d, i, sev, (tags or {}).get(utt, "")))
    return ScoredResult(out)


@dataclass(frozen=True)
class SignificanceResult:
    z: float
    p_value: float
    n: int
    mean_diff: float
    undefined: bool = False
    by_convention: bool = False

    @property
    def significant(self) -> bool:
        if self.undefined:
            return False
        return self.by_convention or self.p_value < ALPHA


def mapsswe(errors_a: Sequence[float], errors_b: Sequence[float]) -> SignificanceResult:
    """Matched-pairs test on per-segment error differences ``a - b``.

    Zero variance with a nonzero mean is reported as significant by
    convention (infinite z); fewer than two segments, or zero variance with
    zero mean, is reported as undefined.
    """
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"segment counts differ: {a.shape} vs {b.shape}")
    d = a - b
    n = len(d)
    if n < 2:
        return SignificanceResult(math.nan, math.nan, n, float(d.mean()) if n else math.nan,
                                  undefined=True)
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return SignificanceResult(math.nan, 1.0, n, 0.0, undefined=True)
        return SignificanceResult(math.copysign(math.inf, mean), 0.0, n, mean,
                                  by_convention=True)
    z = mean / math.sqrt(var / n)
    return SignificanceResult(z, float(2.0 * norm.sf(abs(z))), n, mean)


def paired_errors(a: ScoredResult, b: ScoredResult) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance error counts of two results over their shared ids."""
    ea, eb = a.errors_by_utt(), b.errors_by_utt()
    ids = sorted(set(ea) & set(eb))
    return np.array([ea[i] for i in ids]), np.array([eb[i] for i in ids])


def format_table(rows: Sequence[tuple[str, ScoredResult, str]], header: str = "Sys") -> str:
    """Fixed-width text table: name, VL, L, M, H, All, then a free-form mark column."""
    width = max([len(header)] + [len(r[0]) for r in rows])
    lines = [f"{header:<{width}}  " + "  ".join(f"{c:>6}" for c in COLUMNS)]
    for name, res, mark in rows:
        cells = "  ".join(f"{v:6.2f}" for v in res.breakdown().values())
        lines.append(f"{name:<{width}}  {cells}{('  ' + mark) if mark else ''}")
    return "\n".join(lines) + "\n"
