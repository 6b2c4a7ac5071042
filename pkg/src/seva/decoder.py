"""Isolated-word Viterbi N-best decoding over hybrid posteriors and two-pass
rescoring by score interpolation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .lexicon import Lexicon

log = logging.getLogger(__name__)

DEFAULT_N = 50
LOG_HALF = math.log(0.5)
# softmax outputs can underflow to exactly 0; keep every alignment finite
POSTERIOR_FLOOR = 1e-30


class DecodeError(ValueError):
    pass


@dataclass
class Hypothesis:
    word: str
    first_pass_logprob: float
    second_pass_logprobs: dict[str, float] = field(default_factory=dict)

    def score(self, scorer: str) -> float:
        if scorer == "first_pass":
            return self.first_pass_logprob
        return self.second_pass_logprobs.get(scorer, -math.inf)


@dataclass
class NBestList:
    utterance_id: str
    hypotheses: list[Hypothesis]

    def __len__(self) -> int:
        return len(self.hypotheses)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def viterbi_word_score(loglik: np.ndarray, states: np.ndarray) -> float:
    """Best left-to-right path through ``states`` (self-loop/forward, prob 0.5 each).

    The path must start in the first state at frame 0 and end in the last
    state at the final frame; returns -inf when the word does not fit.
    """
    t_len, k = loglik.shape[0], len(states)
    if t_len < k:
        return -math.inf
    emit = loglik[:, states]
    delta = np.full(k, -np.inf)
    delta[0] = emit[0, 0]
    for t in range(1, t_len):
        moved = np.concatenate([[-np.inf], delta[:-1]])
        delta = np.maximum(delta, moved) + LOG_HALF + emit[t]
    return float(delta[-1])


def hybrid_loglik(posteriors: np.ndarray, priors: np.ndarray | None) -> np.ndarray:
    ll = np.log(np.maximum(posteriors, POSTERIOR_FLOOR))
    if priors is not None:
        ll = ll - np.log(priors)
    return ll


def decode_nbest(posteriors: np.ndarray, lexicon: Lexicon, n: int = DEFAULT_N,
                 priors: np.ndarray | None = None, utterance_id: str = "") -> NBestList:
    """Rank lexicon words by Viterbi score of prior-scaled log posteriors."""
    posteriors = np.asarray(posteriors, dtype=float)
    if np.any(np.abs(posteriors.sum(axis=1) - 1.0) > 1e-6):
        raise DecodeError("posterior rows must sum to 1")
    ll = hybrid_loglik(posteriors, priors)
    scored = []
    for word in lexicon.words:
        s = viterbi_word_score(ll, lexicon.state_sequence(word))
        if s > -math.inf:
            scored.append((word, s))
    if not scored:
        raise DecodeError(f"{utterance_id or 'utterance'}: {len(posteriors)} frames fit no word")
    scored.sort(key=lambda ws: (-ws[1], ws[0]))
    return NBestList(utterance_id, [Hypothesis(w, s) for w, s in scored[:n]])


def rescore(nbest: NBestList, weights: Mapping[str, float]) -> Hypothesis:
    """Pick the hypothesis maximising the weighted sum of scorer values.

    A -inf in any weighted component drops the hypothesis; if every one is
    dropped the first-pass 1-best is returned. Ties go to the better
    first-pass rank.
    """
    if len(nbest) == 0:
        raise DecodeError("empty N-best list")
    best, best_score = None, -math.inf
    for hyp in nbest.hypotheses:
        total = 0.0
        for name, w in weights.items():
            if w == 0:
                continue
            s = hyp.score(name)
            if s == -math.inf:
                total = -math.inf
                break
            total += w * s
        if total > best_score:
            best, best_score = hyp, total
    return nbest.best if best is None else best


def combine_systems(nbest: NBestList, scorers: Sequence[tuple[str, Callable[[str], float]]],
                    weights: Mapping[str, float] | None = None) -> Hypothesis:
    """Attach second-pass scores from each ``(name, fn(word))`` scorer, then rescore.

    Default weights are uniform over first pass and all scorers.
    """
    for hyp in nbest.hypotheses:
        for name, fn in scorers:
            try:
                hyp.second_pass_logprobs[name] = float(fn(hyp.word))
            except Exception as exc:  # a broken scorer must not sink the utterance
                log.warning("scorer %s failed on %s/%s: %s", name, nbest.utterance_id,
                            hyp.word, exc)
                hyp.second_pass_logprobs[name] = -math.inf
    if weights is None:
        names = ["first_pass"] + [name for name, _ in scorers]
        weights = {name: 1.0 / len(names) for name in names}
    return rescore(nbest, weights)


# -- N-best file ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_nbest(fh, lists: Iterable[NBestList]) -> None:
    for nb in lists:
        for rank, hyp in enumerate(nb.hypotheses, start=1):
            extra = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(hyp.second_pass_logprobs.items()))
            fh.write(f"{nb.utterance_id}\t{rank}\t{hyp.word}\t{_fmt(hyp.first_pass_logprob)}"
                     f"\t{extra}\n")


def read_nbest(fh) -> list[NBestList]:
    lists: dict[str, NBestList] = {}
    for line in fh:
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        utt, _, word, first = parts[:4]
        extra = {}
        if len(parts) > 4 and parts[4]:
            for item in parts[4].split(";"):
                k, v = item.split("=", 1)
                extra[k] = float(v)
        lists.setdefault(utt, NBestList(utt, [])).hypotheses.append(
            Hypothesis(word, float(first), extra))
    return list(lists.values())
