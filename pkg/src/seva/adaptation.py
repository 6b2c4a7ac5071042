"""Speaker-severity adaptive training, unsupervised test-time LHUC adaptation
and KLD-regularised severity-dependent fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .hybrid_am import (FrameBatch, HybridDNN, LhucParams, _forward, forward_am, head_weights,
                        init_hybrid, mtl_objective, normalise_inputs, run_epoch)
from .netcore import TrainConfig, log_softmax, softmax, softmax_ce
from .severity import N_SEVERITIES, SeverityLevel

log = logging.getLogger(__name__)

TRI_ONLY = {"tri": 1.0, "mono": 0.0, "seve": 0.0}


@dataclass
class AdaptConfig:
    """``lam`` is the KLD regularisation weight (``lambda`` is reserved in Python)."""

    lam: float = 0.5
    adapt_epochs: int = 10
    adapt_lr: float = 1.0
    pseudo_label_pass: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.adapt_epochs < 0:
            raise ValueError("adapt_epochs must be non-negative")
        if not self.adapt_lr > 0:
            raise ValueError("adapt_lr must be positive")


# -- speaker-severity adaptive training -----------------------------------------

def sat_train(data: FrameBatch, cfg: TrainConfig, *, speakers: Sequence[str], n_states: int,
              n_phones: int, use_seve_head: bool = False, use_lhuc_seve: bool = True,
              freeze_lhuc: bool = False, hidden_dim: int = 256, n_hidden: int = 7,
              lhuc_lr: float | None = None,
              history: list | None = None) -> tuple[HybridDNN, LhucParams]:
    """Alternate a network epoch (r vectors fixed) with an r-vector epoch (network fixed).

    ``data.speaker`` indexes ``speakers``; ``data.severity`` is required when
    ``use_lhuc_seve``. With ``freeze_lhuc`` the r vectors stay at zero and the
    result matches ``train_am`` under the same config.
    """
    if data.speaker is None:
        raise ValueError("sat_train needs speaker labels")
    if use_lhuc_seve and data.severity is None:
        raise ValueError("use_lhuc_seve requires severity labels")
    counts = np.bincount(data.speaker[data.speaker >= 0], minlength=len(speakers))
    if len(counts) > len(speakers):
        raise ValueError("speaker index outside the speaker list")
    empty = [s for s, c in zip(speakers, counts) if c == 0]
    if empty:
        raise ValueError(f"speaker(s) with zero utterances: {', '.join(empty)}")
    weights = head_weights(use_seve_head, cfg.loss_weights or None)
    model = init_hybrid(data.features.shape[1], n_states, n_phones, hidden_dim, n_hidden,
                        seed=cfg.seed)
    normalise_inputs(model, data.features)
    lhuc = LhucParams(model.lhuc_dim, list(speakers))
    view = FrameBatch(data.features, data.tri, data.mono, data.seve, data.speaker,
                      data.severity if use_lhuc_seve else None)
    net_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    r_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    for _ in range(cfg.epochs):
        loss = run_epoch(model, view, cfg, net_rng, weights, lhuc)
        if not freeze_lhuc:
            loss = run_epoch(model, view, cfg, r_rng, weights, lhuc, update_net=False,
                             update_spkr=True, update_seve=use_lhuc_seve, lhuc_lr=lhuc_lr)
        if history is not None:
            history.append(loss)
    return model, lhuc


# -- unsupervised test-time adaptation -----------------------------------------

def _stack(features: Sequence[np.ndarray], aux: Sequence[np.ndarray] | None) -> np.ndarray:
    rows = []
    for i, f in enumerate(features):
        f = np.asarray(f, dtype=float)
        if aux is not None:
            a = np.asarray(aux[i], dtype=float).reshape(-1)
            f = np.hstack([f, np.broadcast_to(a, (len(f), len(a)))])
        rows.append(f)
    return np.vstack(rows)


def pseudo_targets(model: HybridDNN, lhuc: LhucParams | None, x: np.ndarray,
                   speaker: str | None, severity: int | None) -> np.ndarray:
    post = forward_am(model, x, lhuc=lhuc, condition=(speaker, severity))["tri"]
    return post.argmax(axis=1)


def adapt_speaker(model: HybridDNN, lhuc: LhucParams, features: Sequence[np.ndarray],
                  speaker: str, assessed: SeverityLevel | int, cfg: AdaptConfig,
                  aux: Sequence[np.ndarray] | None = None,
                  history: list | None = None) -> LhucParams:
    """Fit a new speaker's r vector to first-pass pseudo labels.

    Works on a private copy of ``lhuc``; the trunk, heads, severity vectors and
    other speakers' vectors are left untouched. Full-batch gradient descent
    on tri-state cross entropy with step halving keeps the loss nonincreasing.
    ``history`` receives ``(epoch, loss)`` pairs, epoch 0 being the start.
    """
    if len(features) == 0:
        raise ValueError(f"no utterances to adapt speaker {speaker!r}")
    severity = int(assessed)
    if not 0 <= severity < N_SEVERITIES:
        raise ValueError(f"bad severity {assessed!r}")
    out = lhuc.copy()
    row = out.add_speaker(speaker)
    x = _stack(features, aux)
    n = len(x)
    spk_idx = np.full(n, row)
    sev_idx = np.full(n, severity)
    scratch = model.copy()  # gradient buffers are written during backprop

    def loss_and_grad(targets):
        out.zero_grad()
        scratch.zero_grad()
        batch = FrameBatch(x, targets, speaker=spk_idx, severity=sev_idx)
        value = mtl_objective(scratch, batch, TRI_ONLY, out, update_net=False)
        return value.scalar, out.g_spkr[row].copy()

    targets = pseudo_targets(model, out, x, speaker, severity)
    loss, grad = loss_and_grad(targets)
    if history is not None:
        history.append((0, loss))
    lr = cfg.adapt_lr
    for epoch in range(1, cfg.adapt_epochs + 1):
        if not cfg.pseudo_label_pass:
            targets = pseudo_targets(model, out, x, speaker, severity)
            loss, grad = loss_and_grad(targets)
        start = out.r_spkr_table[row].copy()
        for _ in range(30):
            out.r_spkr_table[row] = start - lr * grad
            new_loss, new_grad = loss_and_grad(targets)
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            out.r_spkr_table[row] = start
            new_loss, new_grad = loss, grad
        loss, grad = new_loss, new_grad
        if history is not None:
            history.append((epoch, loss))
    out.zero_grad()
    return out


def write_adapt_log(fh, rows) -> None:
    """``epoch<TAB>speaker<TAB>loss`` per line."""
    for epoch, speaker, loss in rows:
        fh.write(f"{epoch}\t{speaker}\t{loss!r}\n")


def read_adapt_log(fh) -> list[tuple[int, str, float]]:
    rows = []
    for line in fh:
        if line.strip():
            e, s, l = line.rstrip("\n").split("\t")
            rows.append((int(e), s, float(l)))
    return rows


# -- KLD-regularised fine-tuning -------------------------------------------------

def kld_targets(hard: np.ndarray, p_si: np.ndarray, lam: float) -> np.ndarray:
    """Interpolated soft targets ``(1 - lam) * onehot + lam * p_si``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p_si = np.asarray(p_si, dtype=float)
    onehot = np.zeros_like(p_si)
    onehot[np.arange(len(p_si)), np.asarray(hard, dtype=int)] = 1.0
    return (1.0 - lam) * onehot + lam * p_si


def kld_loss(logits: np.ndarray, hard: np.ndarray, p_si: np.ndarray,
             lam: float) -> tuple[float, np.ndarray]:
    """Frame-mean ``(1 - lam) * CE(hard) + lam * KL(p_si || p)`` and its logit gradient.

    The KL form differs from cross entropy against the interpolated targets
    only by ``lam`` times the mean entropy of ``p_si``, so the gradient is
    ``softmax(logits) - kld_targets(...)`` per frame (divided by the frame count).
    """
    target = kld_targets(hard, p_si, lam)
    loss, grad = softmax_ce(logits, target)
    p_si = np.asarray(p_si, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p_si > 0, p_si * np.log(p_si), 0.0)
    entropy = -plogp.sum(axis=-1).mean()
    return loss - lam * entropy, grad


def si_posteriors(si_model: HybridDNN, x: np.ndarray) -> np.ndarray:
    logits, _ = _forward(si_model, x)
    return softmax(logits["tri"].output)


def kld_finetune(si_model: HybridDNN, data: FrameBatch, lam: float, cfg: TrainConfig,
                 history: list | None = None) -> HybridDNN:
    """Fine-tune a copy of ``si_model`` on ``data`` towards KLD-regularised targets.

    ``si_model`` itself is never modified; its posteriors are computed once.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if len(data) == 0:
        raise ValueError("empty fine-tuning subset")
    p_si = si_posteriors(si_model, data.features)
    soft = kld_targets(data.tri, p_si, lam)
    model = si_model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 19]))
    for _ in range(cfg.epochs):
        loss = run_epoch(model, FrameBatch(data.features, data.tri), cfg, rng, TRI_ONLY,
                         soft_tri=soft)
        if history is not None:
            history.append(loss)
    return model


def kld_finetune_by_severity(si_model: HybridDNN, data: FrameBatch, lam: float,
                             cfg: TrainConfig) -> dict[SeverityLevel, HybridDNN]:
    """One severity-dependent model per level present in ``data.seve``."""
    if data.seve is None:
        raise ValueError("severity labels required")
    out = {}
    for lvl in np.unique(data.seve):
        out[SeverityLevel(int(lvl))] = kld_finetune(si_model, data.take(data.seve == lvl),
                                                   lam, cfg)
    return out


def mean_kl_to(model: HybridDNN, reference: HybridDNN, x: np.ndarray) -> float:
    """Frame-mean KL(reference || model) of tri-state posteriors."""
    p_ref = si_posteriors(reference, x)
    logq = log_softmax(_forward(model, x)[0]["tri"].output)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_ref > 0, p_ref * (np.log(p_ref) - logq), 0.0)
    return float(terms.sum(axis=1).mean())
