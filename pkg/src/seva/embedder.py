"""Dual-target spectral-basis embedder.

A 3-hidden-layer network reads an utterance's flattened top spectral bases
and predicts both severity and speaker; its 25-dim bottleneck is used as an
auxiliary input for the acoustic models, and its severity head assesses
unseen speakers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .features import SpectralBases
from .netcore import (DimensionError, Layer, NetParams, TrainConfig, backward, forward,
                      init_params, interpolate_losses, minibatches, read_params, sgd_update,
                      softmax, softmax_ce, write_params)
from .severity import N_SEVERITIES, SeverityLevel

BOTTLENECK_DIM = 25
HIDDEN = (64, 64, BOTTLENECK_DIM)
EMBEDDER_WEIGHTS = {"seve": 0.5, "spk": 0.5}


@dataclass
class EmbedderNet:
    trunk: NetParams
    severity_head: NetParams
    speaker_head: NetParams
    speakers: list[str]
    input_mean: np.ndarray
    input_scale: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.trunk.in_dim

    def nets(self) -> list[NetParams]:
        return [self.trunk, self.severity_head, self.speaker_head]


def _as_matrix(bases) -> np.ndarray:
    if isinstance(bases, SpectralBases):
        return bases.flatten()[None, :]
    if isinstance(bases, (list, tuple)) and bases and isinstance(bases[0], SpectralBases):
        return np.stack([b.flatten() for b in bases])
    x = np.asarray(bases, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _bottleneck(net: EmbedderNet, x: np.ndarray):
    if x.shape[1] != net.input_dim:
        raise DimensionError(f"embedder expects {net.input_dim} dims, got {x.shape[1]}")
    return forward(net.trunk, (x - net.input_mean) / net.input_scale)


def init_embedder(input_dim: int, speakers: Sequence[str], seed: int = 0,
                  hidden: Sequence[int] = HIDDEN) -> EmbedderNet:
    rng = np.random.default_rng(seed)
    trunk = init_params([input_dim, *hidden], "relu", rng)
    seve = init_params([hidden[-1], N_SEVERITIES], "linear", rng)
    spk = init_params([hidden[-1], max(1, len(speakers))], "linear", rng)
    return EmbedderNet(trunk, seve, spk, list(speakers), np.zeros(input_dim), np.ones(input_dim))


def embedder_objective(net: EmbedderNet, x: np.ndarray, y_seve: np.ndarray,
                       y_spk: np.ndarray, weights=EMBEDDER_WEIGHTS, backprop: bool = True):
    acts = _bottleneck(net, x)
    z = acts.output
    a_sev = forward(net.severity_head, z)
    a_spk = forward(net.speaker_head, z)
    l_sev, g_sev = softmax_ce(a_sev.output, y_seve)
    l_spk, g_spk = softmax_ce(a_spk.output, y_spk)
    value = interpolate_losses(weights, {"seve": l_sev, "spk": l_spk})
    if backprop:
        dz = (backward(net.severity_head, a_sev, weights["seve"] * g_sev)
              + backward(net.speaker_head, a_spk, weights["spk"] * g_spk))
        backward(net.trunk, acts, dz, need_input_grad=False)
    return value


def train_embedder(x, severity: Sequence[int], speakers: Sequence[str], cfg: TrainConfig,
                   history: list | None = None, hidden: Sequence[int] = HIDDEN) -> EmbedderNet:
    """Train on flattened spectral bases with severity and speaker targets."""
    x = _as_matrix(x)
    severity = np.asarray(severity, dtype=int)
    if len(np.unique(severity)) < 2:
        raise ValueError("degenerate targets: need at least two severity classes")
    spk_list = sorted(set(speakers))
    spk_idx = np.array([spk_list.index(s) for s in speakers])
    net = init_embedder(x.shape[1], spk_list, cfg.seed, hidden)
    net.input_mean = x.mean(axis=0)
    net.input_scale = np.maximum(x.std(axis=0), 1e-8)
    weights = cfg.loss_weights or EMBEDDER_WEIGHTS
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(x), cfg.batch_size, rng):
            for n in net.nets():
                n.zero_grad()
            v = embedder_objective(net, x[idx], severity[idx], spk_idx[idx], weights)
            for n in net.nets():
                sgd_update(n, cfg.learning_rate)
            total += v.scalar * len(idx)
        if history is not None:
            history.append(total / len(x))
    return net


def extract_aux(net: EmbedderNet, bases) -> np.ndarray:
    """Bottleneck activations (post-ReLU), one 25-dim row per utterance."""
    out = _bottleneck(net, _as_matrix(bases)).output
    return out[0] if isinstance(bases, SpectralBases) else out


def severity_posteriors(net: EmbedderNet, bases) -> np.ndarray:
    z = _bottleneck(net, _as_matrix(bases)).output
    return softmax(forward(net.severity_head, z).output)


def assess_severity(net: EmbedderNet, bases) -> tuple[SeverityLevel, np.ndarray]:
    """Average utterance severity posteriors for one speaker, then argmax.

    Exact ties resolve to the more severe (lower) level.
    """
    post = severity_posteriors(net, bases)
    if len(post) == 0:
        raise ValueError("no utterances to assess")
    mean = post.mean(axis=0)
    return SeverityLevel(int(np.argmax(mean))), mean


# -- checkpoint ----------------------------------------------------------------

def write_embedder(fh: BinaryIO, net: EmbedderNet) -> None:
    norm = NetParams([Layer(np.diag(1.0 / net.input_scale), -net.input_mean / net.input_scale,
                            "linear")])
    for p in (norm, *net.nets()):
        write_params(fh, p)
    names = "\n".join(net.speakers).encode("utf-8")
    fh.write(len(names).to_bytes(4, "little") + names)


def read_embedder(fh: BinaryIO) -> EmbedderNet:
    norm, trunk, seve, spk = (read_params(fh) for _ in range(4))
    n = int.from_bytes(fh.read(4), "little")
    speakers = fh.read(n).decode("utf-8").split("\n") if n else []
    scale = 1.0 / np.diag(norm.layers[0].weight)
    return EmbedderNet(trunk, seve, spk, speakers, -norm.layers[0].bias * scale, scale)


def save_embedder(path, net: EmbedderNet) -> None:
    with open(path, "wb") as fh:
        write_embedder(fh, net)


def load_embedder(path) -> EmbedderNet:
    with open(path, "rb") as fh:
        return read_embedder(fh)


def write_assessments(fh, rows) -> None:
    """``speaker<TAB>level<TAB>p_VL p_L p_M p_H`` per line."""
    for speaker, level, post in rows:
        fh.write(f"{speaker}\t{SeverityLevel(level).short}\t"
                 + " ".join(f"{p:.6f}" for p in post) + "\n")


# -- estimator -----------------------------------------------------------------

class SpectralBasisEmbedder(TransformerMixin, BaseEstimator):
    """sklearn-style wrapper: ``fit(X, severity, speaker=...)``, ``transform`` gives
    bottleneck features, ``predict``/``predict_proba`` the severity head."""

    def __init__(self, hidden=HIDDEN, learning_rate=0.05, epochs=60, batch_size=32, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, *, speaker=None):
        X = check_array(X, dtype=np.float64)
        speaker = [str(i) for i in range(len(X))] if speaker is None else list(speaker)
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed)
        self.loss_curve_ = []
        self.net_ = train_embedder(X, y, speaker, cfg, self.loss_curve_, self.hidden)
        self.classes_ = np.arange(N_SEVERITIES)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return extract_aux(self.net_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return severity_posteriors(self.net_, check_array(X, dtype=np.float64))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def assess(self, X) -> SeverityLevel:
        check_is_fitted(self, "net_")
        return assess_severity(self.net_, check_array(X, dtype=np.float64))[0]
