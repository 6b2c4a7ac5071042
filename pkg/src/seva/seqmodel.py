"""Spliced-frame CTC model with a mean-pooled severity head.

The encoder is a per-frame feed-forward stack over +-3 frames of context.
Training minimises the CTC / severity interpolation, with a slot for an
externally computed attention-decoder loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import BinaryIO, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .lexicon import Lexicon
from .netcore import (LossValue, NetParams, NumericError, TrainConfig, backward, forward,
                      init_params, interpolate_losses, log_softmax, read_params, sgd_update,
                      softmax, softmax_ce, write_params, Layer)
from .severity import N_SEVERITIES

BLANK = 0
CONTEXT = 3
SEQ_WEIGHTS = {"ctc": 0.5, "seve": 0.5}
CONFORMER_WEIGHTS = {"ctc": 1 / 3, "aed": 1 / 3, "seve": 1 / 3}


class CtcError(ValueError):
    pass


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels`` (repeats need a blank between)."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _extended(labels: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=int)
    ext[1::2] = labels
    return ext


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left if negative), filling with -inf."""
    out = np.full_like(x, -np.inf)
    if abs(k) < len(x):
        if k >= 0:
            out[k:] = x[:len(x) - k]
        else:
            out[:k] = x[-k:]
    return out


def ctc_forward(logp: np.ndarray, labels: Sequence[int]) -> tuple[np.ndarray, float]:
    """Log-domain alpha table (T x S) and total log-probability."""
    labels = [int(l) for l in labels]
    if any(l == BLANK for l in labels):
        raise CtcError("labels must not contain the blank symbol")
    t_len = logp.shape[0]
    if t_len < min_frames(labels):
        raise CtcError(f"sequence too short: {t_len} frames for {len(labels)} labels")
    ext = _extended(labels)
    skip = _skip_mask(ext)
    s_len = len(ext)
    alpha = np.full((t_len, s_len), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        a2 = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), a2) + logp[t, ext]
    tail = alpha[-1, -2:] if s_len > 1 else alpha[-1, -1:]
    return alpha, float(logsumexp(tail))


def ctc_backward(logp: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Log-domain beta table: probability of the remainder after frame t, given state s at t
    (emission at t excluded)."""
    ext = _extended([int(l) for l in labels])
    skip = _skip_mask(ext)
    t_len, s_len = logp.shape[0], len(ext)
    beta = np.full((t_len, s_len), -np.inf)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(s_len, dtype=bool)  # s -> s+2 allowed
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        b2 = np.where(skip_from, _shift(nxt, -2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), b2)
    return beta


def ctc_loss(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-probability of ``labels`` and its gradient w.r.t. ``logits`` (T x V+1)."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    logp = log_softmax(logits)
    alpha, log_z = ctc_forward(logp, labels)
    beta = ctc_backward(logp, labels)
    ext = _extended([int(l) for l in labels])
    gamma = np.exp(alpha + beta - log_z)  # occupation of each extended state
    occ = np.zeros_like(logits)
    for s, sym in enumerate(ext):
        occ[:, sym] += gamma[:, s]
    grad = np.exp(logp) - occ
    return -log_z, grad


def ctc_logprob(logits: np.ndarray, labels: Sequence[int]) -> float:
    """Forward-only log-probability; -inf when the labels cannot fit."""
    try:
        return ctc_forward(log_softmax(np.asarray(logits, dtype=float)), labels)[1]
    except CtcError:
        return -math.inf


def _value(x) -> float:
    return x.scalar if isinstance(x, LossValue) else float(x)


def mtl_loss_seq(ctc, seve, aed=None, weights: Mapping[str, float] | None = None,
                 mode: str = "ctc_seve") -> LossValue:
    """CTC/severity interpolation (``ctc_seve``, weights 1/2 each) or the three-way
    CTC/attention/severity form (``ctc_aed_seve``, weights 1/3 each)."""
    if weights is None:
        weights = {"ctc_seve": SEQ_WEIGHTS, "ctc_aed_seve": CONFORMER_WEIGHTS}[mode]
    comps = {"ctc": _value(ctc), "seve": _value(seve)}
    if aed is not None:
        comps["aed"] = _value(aed)
    return interpolate_losses(weights, comps)


def splice(features: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """Stack +-context neighbouring frames (edges repeated): T x (2c+1)D."""
    t = len(features)
    idx = np.clip(np.arange(t)[:, None] + np.arange(-context, context + 1)[None, :], 0, t - 1)
    return features[idx].reshape(t, -1)


@dataclass
class CtcModel:
    encoder: NetParams
    ctc_head: NetParams
    seve_head: NetParams
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    context: int = CONTEXT

    @property
    def vocab_size(self) -> int:
        return self.ctc_head.out_dim - 1

    def nets(self) -> list[NetParams]:
        return [self.encoder, self.ctc_head, self.seve_head]


def init_ctc_model(feat_dim: int, vocab_size: int, hidden: Sequence[int] = (256, 256),
                   context: int = CONTEXT, seed: int = 0) -> CtcModel:
    rng = np.random.default_rng(seed)
    in_dim = (2 * context + 1) * feat_dim
    enc = init_params([in_dim, *hidden], "relu", rng)
    ctc = init_params([hidden[-1], vocab_size + 1], "linear", rng)
    sev = init_params([hidden[-1], N_SEVERITIES], "linear", rng)
    return CtcModel(enc, ctc, sev, np.zeros(in_dim), np.ones(in_dim), context)


def _encode(model: CtcModel, features: np.ndarray):
    x = (splice(np.asarray(features, dtype=float), model.context) - model.feature_mean) \
        / model.feature_scale
    return forward(model.encoder, x)


def ctc_logits(model: CtcModel, features: np.ndarray) -> np.ndarray:
    return forward(model.ctc_head, _encode(model, features).output).output


def severity_posterior(model: CtcModel, features: np.ndarray) -> np.ndarray:
    pooled = _encode(model, features).output.mean(axis=0)
    return softmax(forward(model.seve_head, pooled).output)


def ctc_score(model: CtcModel, features: np.ndarray, hypothesis: Sequence[int]) -> float:
    """Log-probability of exactly ``hypothesis``; -inf if it cannot fit the input."""
    return ctc_logprob(ctc_logits(model, features), hypothesis)


def seq_objective(model: CtcModel, features: np.ndarray, labels: Sequence[int], severity: int,
                  weights: Mapping[str, float], backprop: bool = True,
                  scale: float = 1.0) -> LossValue:
    """Loss for one utterance; gradients (times ``scale``) accumulate into the nets."""
    enc = _encode(model, features)
    h = enc.output
    head = forward(model.ctc_head, h)
    l_ctc, g_ctc = ctc_loss(head.output, labels)
    comps = {"ctc": l_ctc}
    dh = None
    if weights.get("seve", 0) > 0:
        pooled = forward(model.seve_head, h.mean(axis=0))
        l_sev, g_sev = softmax_ce(pooled.output, int(severity))
        comps["seve"] = l_sev
    value = mtl_loss_seq(comps["ctc"], comps.get("seve", 0.0), weights=weights)
    if backprop:
        dh = backward(model.ctc_head, head, scale * weights["ctc"] * g_ctc)
        if "seve" in comps:
            dp = backward(model.seve_head, pooled, scale * weights["seve"] * g_sev)
            dh = dh + np.broadcast_to(dp / len(h), h.shape)
        backward(model.encoder, enc, dh, need_input_grad=False)
    return value


def train_seq(features: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
              severities: Sequence[int], cfg: TrainConfig, vocab_size: int,
              use_severity: bool = True, hidden: Sequence[int] = (256, 256),
              history: list | None = None) -> CtcModel:
    """Minibatch SGD over utterances on the CTC (+ severity) objective."""
    if len(features) == 0:
        raise ValueError("empty training corpus")
    weights = dict(cfg.loss_weights or SEQ_WEIGHTS)
    if not use_severity:
        weights = {"ctc": 1.0, "seve": 0.0}
    model = init_ctc_model(features[0].shape[1], vocab_size, hidden, seed=cfg.seed)
    stacked = np.vstack([splice(f, model.context) for f in features])
    model.feature_mean = stacked.mean(axis=0)
    model.feature_scale = np.maximum(stacked.std(axis=0), 1e-8)
    del stacked
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
    n = len(features)
    for _ in range(cfg.epochs):
        total = 0.0
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            for net in model.nets():
                net.zero_grad()
            for j in idx:
                v = seq_objective(model, features[j], labels[j], severities[j], weights,
                                  scale=1.0 / len(idx))
                total += v.scalar
            for net in model.nets():
                sgd_update(net, cfg.learning_rate)
        if not np.isfinite(total):
            raise NumericError("non-finite training loss")
        if history is not None:
            history.append(total / n)
    return model


def recognise(model: CtcModel, features: np.ndarray, lexicon: Lexicon) -> tuple[str, dict]:
    """Lexicon-constrained decoding: the word whose spelling scores highest."""
    logits = ctc_logits(model, features)
    scores = {w: ctc_logprob(logits, lexicon.graphemes(w)) for w in lexicon.words}
    best = max(lexicon.words, key=lambda w: (scores[w], [-ord(c) for c in w]))
    return best, scores


# -- checkpoint ----------------------------------------------------------------

def write_ctc_model(fh: BinaryIO, model: CtcModel) -> None:
    norm = NetParams([Layer(np.diag(1.0 / model.feature_scale),
                            -model.feature_mean / model.feature_scale, "linear")])
    for p in (norm, *model.nets()):
        write_params(fh, p)
    fh.write(int(model.context).to_bytes(4, "little"))


def read_ctc_model(fh: BinaryIO) -> CtcModel:
    norm, enc, ctc, sev = (read_params(fh) for _ in range(4))
    context = int.from_bytes(fh.read(4), "little")
    scale = 1.0 / np.diag(norm.layers[0].weight)
    return CtcModel(enc, ctc, sev, -norm.layers[0].bias * scale, scale, context)


def save_ctc_model(path, model: CtcModel) -> None:
    with open(path, "wb") as fh:
        write_ctc_model(fh, model)


def load_ctc_model(path) -> CtcModel:
    with open(path, "rb") as fh:
        return read_ctc_model(fh)


def write_scores(fh, rows) -> None:
    """``utt_id<TAB>hyp_rank<TAB>logprob`` lines."""
    for utt_id, rank, lp in rows:
        fh.write(f"{utt_id}\t{rank}\t{lp!r}\n")
