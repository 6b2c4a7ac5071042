"""Hybrid DNN frame classifier with structured speaker/severity LHUC scaling
and a tri-state / monophone / severity multitask loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .netcore import (DimensionError, LossValue, NetParams, NumericError, TrainConfig,
                      backward, forward, init_params, interpolate_losses, log_softmax,
                      minibatches, read_params, sigmoid, softmax, softmax_ce, sgd_update,
                      write_params)
from .severity import N_SEVERITIES

HEADS = ("tri", "mono", "seve")
DEFAULT_WEIGHTS = {"tri": 1 / 3, "mono": 1 / 3, "seve": 1 / 3}
LHUC_MAGIC = b"LHUC"


def xi(r: np.ndarray) -> np.ndarray:
    """LHUC amplitude function, 2 * sigmoid(r), range (0, 2)."""
    return 2.0 * sigmoid(r)


def _dxi(r: np.ndarray) -> np.ndarray:
    s = sigmoid(r)
    return 2.0 * s * (1.0 - s)


def lhuc_scale(h: np.ndarray, r_s: np.ndarray, r_v: np.ndarray) -> np.ndarray:
    """Element-wise ``xi(r_s) * xi(r_v) * h``."""
    h, r_s, r_v = np.asarray(h), np.asarray(r_s), np.asarray(r_v)
    if r_s.shape[-1] != h.shape[-1] or r_v.shape[-1] != h.shape[-1]:
        raise DimensionError(
            f"LHUC vectors of dims {r_s.shape[-1]}/{r_v.shape[-1]} cannot scale {h.shape[-1]}")
    return xi(r_s) * xi(r_v) * h


@dataclass
class HybridDNN:
    trunk: NetParams
    tri_head: NetParams
    mono_head: NetParams
    seve_head: NetParams
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.trunk.in_dim

    @property
    def lhuc_dim(self) -> int:
        return self.trunk.layers[0].out_dim

    @property
    def n_states(self) -> int:
        return self.tri_head.out_dim

    def nets(self) -> dict[str, NetParams]:
        return {"trunk": self.trunk, "tri": self.tri_head, "mono": self.mono_head,
                "seve": self.seve_head}

    def zero_grad(self) -> None:
        for net in self.nets().values():
            net.zero_grad()

    def copy(self) -> "HybridDNN":
        return HybridDNN(self.trunk.copy(), self.tri_head.copy(), self.mono_head.copy(),
                         self.seve_head.copy(), self.feature_mean.copy(),
                         self.feature_scale.copy())


def init_hybrid(input_dim: int, n_states: int, n_phones: int, hidden_dim: int = 256,
                n_hidden: int = 7, seed: int = 0) -> HybridDNN:
    rng = np.random.default_rng(seed)
    trunk = init_params([input_dim] + [hidden_dim] * n_hidden, "relu", rng)
    heads = [init_params([hidden_dim, n], "linear", rng)
             for n in (n_states, n_phones, N_SEVERITIES)]
    return HybridDNN(trunk, *heads, np.zeros(input_dim), np.ones(input_dim))


@dataclass
class LhucParams:
    """Speaker and severity scaling vectors; zero vectors mean identity."""

    dim: int
    speakers: list[str] = field(default_factory=list)
    r_spkr_table: np.ndarray = None
    r_seve_table: np.ndarray = None

    def __post_init__(self):
        if self.r_spkr_table is None:
            self.r_spkr_table = np.zeros((len(self.speakers), self.dim))
        if self.r_seve_table is None:
            self.r_seve_table = np.zeros((N_SEVERITIES, self.dim))
        self.zero_grad()

    def zero_grad(self) -> None:
        self.g_spkr = np.zeros_like(self.r_spkr_table)
        self.g_seve = np.zeros_like(self.r_seve_table)

    @property
    def r_spkr(self) -> dict[str, np.ndarray]:
        return {s: self.r_spkr_table[i] for i, s in enumerate(self.speakers)}

    @property
    def r_seve(self) -> dict[int, np.ndarray]:
        return {lvl: self.r_seve_table[lvl] for lvl in range(N_SEVERITIES)}

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise KeyError(f"no LHUC vector for speaker {speaker!r}") from None

    def add_speaker(self, speaker: str) -> int:
        if speaker in self.speakers:
            return self.speakers.index(speaker)
        self.speakers.append(speaker)
        self.r_spkr_table = np.vstack([self.r_spkr_table, np.zeros((1, self.dim))])
        self.g_spkr = np.vstack([self.g_spkr, np.zeros((1, self.dim))])
        return len(self.speakers) - 1

    def copy(self) -> "LhucParams":
        return LhucParams(self.dim, list(self.speakers), self.r_spkr_table.copy(),
                          self.r_seve_table.copy())


@dataclass
class FrameBatch:
    """Frames pooled over utterances with optional per-frame condition indices.

    ``speaker``/``severity`` index rows of the LHUC tables (-1 = identity).
    """

    features: np.ndarray
    tri: np.ndarray | None = None
    mono: np.ndarray | None = None
    seve: np.ndarray | None = None
    speaker: np.ndarray | None = None
    severity: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.features)

    def take(self, idx: np.ndarray) -> "FrameBatch":
        def pick(a):
            return None if a is None else a[idx]
        return FrameBatch(self.features[idx], pick(self.tri), pick(self.mono), pick(self.seve),
                          pick(self.speaker), pick(self.severity))


@dataclass
class _Cache:
    first: object
    rest: object
    h1: np.ndarray
    scale: np.ndarray | None
    xs: np.ndarray | None
    xv: np.ndarray | None


def _scales(lhuc: LhucParams | None, speaker, severity, n):
    if lhuc is None or (speaker is None and severity is None):
        return None, None, None
    ones = np.ones((n, lhuc.dim))
    xs = ones if speaker is None else np.where(
        (speaker >= 0)[:, None], xi(lhuc.r_spkr_table[np.maximum(speaker, 0)]), 1.0)
    xv = ones if severity is None else np.where(
        (severity >= 0)[:, None], xi(lhuc.r_seve_table[np.maximum(severity, 0)]), 1.0)
    return xs * xv, xs, xv


def _forward(model: HybridDNN, x: np.ndarray, lhuc=None, speaker=None, severity=None):
    x = (x - model.feature_mean) / model.feature_scale
    first = forward(model.trunk, x, 0, 1)
    h1 = first.output
    scale, xs, xv = _scales(lhuc, speaker, severity, len(x))
    h = h1 if scale is None else h1 * scale
    rest = forward(model.trunk, h, 1)
    top = rest.output
    logits = {"tri": forward(model.tri_head, top), "mono": forward(model.mono_head, top),
              "seve": forward(model.seve_head, top)}
    return logits, _Cache(first, rest, h1, scale, xs, xv)


def _backward(model: HybridDNN, logits, cache: _Cache, dlogits: Mapping[str, np.ndarray],
              lhuc: LhucParams | None = None, speaker=None, severity=None,
              update_net: bool = True) -> None:
    heads = {"tri": model.tri_head, "mono": model.mono_head, "seve": model.seve_head}
    dtop = 0.0
    for name, g in dlogits.items():
        dtop = dtop + backward(heads[name], logits[name], g)
    dh = backward(model.trunk, cache.rest, dtop)
    if cache.scale is not None and lhuc is not None:
        dscale = dh * cache.h1
        if speaker is not None:
            m = speaker >= 0
            np.add.at(lhuc.g_spkr, speaker[m],
                      (dscale * cache.xv)[m] * _dxi(lhuc.r_spkr_table[speaker[m]]))
        if severity is not None:
            m = severity >= 0
            np.add.at(lhuc.g_seve, severity[m],
                      (dscale * cache.xs)[m] * _dxi(lhuc.r_seve_table[severity[m]]))
        dh = dh * cache.scale
    if update_net:
        backward(model.trunk, cache.first, dh, need_input_grad=False)


def forward_am(model: HybridDNN, features: np.ndarray, aux: np.ndarray | None = None,
               lhuc: LhucParams | None = None, condition: tuple[str | None, int | None] | None = None
               ) -> dict[str, np.ndarray]:
    """Per-frame posteriors of all three heads for one utterance.

    ``aux`` is broadcast to every frame; ``condition`` = (speaker, severity)
    selects LHUC vectors (either may be None for identity).
    """
    x = np.asarray(features, dtype=float)
    if aux is not None:
        aux = np.asarray(aux, dtype=float).reshape(-1)
        x = np.hstack([x, np.broadcast_to(aux, (len(x), len(aux)))])
    if x.shape[1] != model.input_dim:
        if aux is None and x.shape[1] < model.input_dim:
            raise DimensionError(
                f"model expects {model.input_dim} input dims; auxiliary features missing")
        raise DimensionError(f"model expects {model.input_dim} input dims, got {x.shape[1]}")
    spk = sev = None
    if condition is not None and lhuc is not None:
        speaker, severity = condition
        if speaker is not None:
            spk = np.full(len(x), lhuc.speaker_index(speaker))
        if severity is not None:
            if not 0 <= int(severity) < N_SEVERITIES:
                raise KeyError(f"no LHUC vector for severity {severity!r}")
            sev = np.full(len(x), int(severity))
    logits, _ = _forward(model, x, lhuc, spk, sev)
    return {k: softmax(v.output) for k, v in logits.items()}


def head_weights(use_seve_head: bool, base: Mapping[str, float] | None = None) -> dict[str, float]:
    """Loss weights with a disabled severity head's share spread over the others."""
    w = dict(DEFAULT_WEIGHTS if base is None else base)
    if not use_seve_head:
        share = w.pop("seve", 0.0)
        enabled = [k for k in w if w[k] > 0] or list(w)
        for k in enabled:
            w[k] += share / len(enabled)
        w["seve"] = 0.0
    return w


def mtl_loss_dnn(posteriors: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray],
                 weights: Mapping[str, float] = DEFAULT_WEIGHTS) -> LossValue:
    """Weighted sum of frame-mean cross entropies of each head's posteriors."""
    comps = {}
    for name, w in weights.items():
        if name not in posteriors or name not in targets:
            continue
        p = np.asarray(posteriors[name])
        t = np.asarray(targets[name])
        if len(p) != len(t):
            raise DimensionError(f"{name}: {len(p)} posterior rows vs {len(t)} targets")
        with np.errstate(divide="ignore"):
            comps[name] = float(-np.mean(np.log(p[np.arange(len(t)), t])))
    return interpolate_losses(weights, comps)


def mtl_objective(model: HybridDNN, batch: FrameBatch, weights: Mapping[str, float],
                  lhuc: LhucParams | None = None, soft_tri: np.ndarray | None = None,
                  backprop: bool = True, update_net: bool = True) -> LossValue:
    """Loss and (optionally) accumulated gradients for a frame batch.

    ``soft_tri`` replaces the tri-state one-hot targets with distributions.
    """
    logits, cache = _forward(model, batch.features, lhuc, batch.speaker, batch.severity)
    targets = {"tri": soft_tri if soft_tri is not None else batch.tri,
               "mono": batch.mono, "seve": batch.seve}
    comps, grads = {}, {}
    for name, w in weights.items():
        if w == 0 or targets.get(name) is None:
            continue
        loss, g = softmax_ce(logits[name].output, targets[name])
        comps[name] = loss
        grads[name] = w * g
    value = interpolate_losses(weights, comps)
    if not np.isfinite(value.scalar):
        raise NumericError("non-finite training loss")
    if backprop:
        _backward(model, logits, cache, grads, lhuc, batch.speaker, batch.severity, update_net)
    return value


def _lhuc_step(lhuc: LhucParams, lr: float, speakers: bool, severities: bool) -> None:
    if speakers:
        lhuc.r_spkr_table -= lr * lhuc.g_spkr
    if severities:
        lhuc.r_seve_table -= lr * lhuc.g_seve


def run_epoch(model: HybridDNN, data: FrameBatch, cfg: TrainConfig, rng: np.random.Generator,
              weights: Mapping[str, float], lhuc: LhucParams | None = None,
              update_net: bool = True, update_spkr: bool = False, update_seve: bool = False,
              lhuc_lr: float | None = None, soft_tri: np.ndarray | None = None) -> float:
    """One shuffled minibatch SGD pass; returns the frame-weighted mean loss."""
    lhuc_lr = cfg.learning_rate if lhuc_lr is None else lhuc_lr
    total = 0.0
    for idx in minibatches(len(data), cfg.batch_size, rng):
        model.zero_grad()
        if lhuc is not None:
            lhuc.zero_grad()
        batch = data.take(idx)
        value = mtl_objective(model, batch, weights, lhuc,
                              None if soft_tri is None else soft_tri[idx],
                              update_net=update_net)
        if update_net:
            for net in model.nets().values():
                sgd_update(net, cfg.learning_rate)
        if lhuc is not None:
            _lhuc_step(lhuc, lhuc_lr, update_spkr, update_seve)
        total += value.scalar * len(idx)
    return total / max(len(data), 1)


def normalise_inputs(model: HybridDNN, features: np.ndarray) -> None:
    model.feature_mean = features.mean(axis=0)
    model.feature_scale = np.maximum(features.std(axis=0), 1e-8)


def train_am(data: FrameBatch, cfg: TrainConfig, *, n_states: int, n_phones: int,
             use_seve_head: bool = False, use_lhuc_seve: bool = False,
             lhuc_sat: bool = False, speakers: Sequence[str] = (), hidden_dim: int = 256,
             n_hidden: int = 7, lhuc_lr: float | None = None,
             history: list | None = None) -> tuple[HybridDNN, LhucParams | None]:
    """Jointly train trunk, heads and any enabled LHUC vectors.

    ``data.severity`` must be set when ``use_lhuc_seve``; ``data.speaker`` when
    ``lhuc_sat``.
    """
    if use_lhuc_seve and data.severity is None:
        raise ValueError("use_lhuc_seve requires severity labels")
    if use_seve_head and data.seve is None:
        raise ValueError("use_seve_head requires severity targets")
    if lhuc_sat and data.speaker is None:
        raise ValueError("lhuc_sat requires speaker labels")
    weights = head_weights(use_seve_head, cfg.loss_weights or None)
    model = init_hybrid(data.features.shape[1], n_states, n_phones, hidden_dim, n_hidden,
                        seed=cfg.seed)
    normalise_inputs(model, data.features)
    lhuc = None
    if use_lhuc_seve or lhuc_sat:
        lhuc = LhucParams(model.lhuc_dim, list(speakers))
    view = FrameBatch(data.features, data.tri, data.mono, data.seve,
                      data.speaker if lhuc_sat else None,
                      data.severity if use_lhuc_seve else None)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    for epoch in range(cfg.epochs):
        loss = run_epoch(model, view, cfg, rng, weights, lhuc, update_spkr=lhuc_sat,
                         update_seve=use_lhuc_seve, lhuc_lr=lhuc_lr)
        if history is not None:
            history.append(loss)
    return model, lhuc


def state_priors(tri_targets: np.ndarray, n_states: int, floor: float = 1e-6) -> np.ndarray:
    counts = np.bincount(tri_targets, minlength=n_states).astype(float)
    return np.maximum(counts / counts.sum(), floor)


# -- checkpoint ----------------------------------------------------------------

def write_hybrid(fh: BinaryIO, model: HybridDNN, lhuc: LhucParams | None = None) -> None:
    from .netcore import Layer
    norm = NetParams([Layer(np.diag(1.0 / model.feature_scale),
                            -model.feature_mean / model.feature_scale, "linear")])
    for net in (norm, model.trunk, model.tri_head, model.mono_head, model.seve_head):
        write_params(fh, net)
    fh.write(LHUC_MAGIC)
    if lhuc is None:
        fh.write(struct.pack("<III", 0, 0, 0))
        return
    fh.write(struct.pack("<III", lhuc.dim, len(lhuc.speakers), N_SEVERITIES))
    for spk, row in zip(lhuc.speakers, lhuc.r_spkr_table):
        key = spk.encode("utf-8")
        fh.write(struct.pack("<I", len(key)) + key)
        fh.write(np.ascontiguousarray(row, dtype="<f8").tobytes())
    for lvl, row in enumerate(lhuc.r_seve_table):
        fh.write(struct.pack("<I", lvl))
        fh.write(np.ascontiguousarray(row, dtype="<f8").tobytes())


def read_hybrid(fh: BinaryIO) -> tuple[HybridDNN, LhucParams | None]:
    norm, trunk, tri, mono, seve = (read_params(fh) for _ in range(5))
    scale = 1.0 / np.diag(norm.layers[0].weight)
    mean = -norm.layers[0].bias * scale
    model = HybridDNN(trunk, tri, mono, seve, mean, scale)
    if fh.read(4) != LHUC_MAGIC:
        raise ValueError("missing LHUC section")
    dim, n_spk, n_sev = struct.unpack("<III", fh.read(12))
    if dim == 0:
        return model, None
    speakers, rows = [], []
    for _ in range(n_spk):
        (n,) = struct.unpack("<I", fh.read(4))
        speakers.append(fh.read(n).decode("utf-8"))
        rows.append(np.frombuffer(fh.read(8 * dim), dtype="<f8"))
    seve = np.zeros((N_SEVERITIES, dim))
    for _ in range(n_sev):
        (lvl,) = struct.unpack("<I", fh.read(4))
        seve[lvl] = np.frombuffer(fh.read(8 * dim), dtype="<f8")
    spk_table = np.array(rows).reshape(n_spk, dim)
    return model, LhucParams(dim, speakers, spk_table, seve)


def save_hybrid(path, model: HybridDNN, lhuc: LhucParams | None = None) -> None:
    with open(path, "wb") as fh:
        write_hybrid(fh, model, lhuc)


def load_hybrid(path) -> tuple[HybridDNN, LhucParams | None]:
    with open(path, "rb") as fh:
        return read_hybrid(fh)


# -- estimator -----------------------------------------------------------------

class HybridAcousticModel(ClassifierMixin, BaseEstimator):
    """Frame-level tri-state classifier.

    ``X`` holds pooled frames (auxiliary features already appended when
    used). Condition labels go in as keyword arrays aligned with ``X``.
    """

    def __init__(self, n_states=36, n_phones=12, hidden_dim=256, n_hidden=7,
                 use_seve_head=False, use_lhuc_seve=False, lhuc_sat=False,
                 learning_rate=0.05, epochs=10, batch_size=256, seed=0, lhuc_lr=None):
        self.n_states = n_states
        self.n_phones = n_phones
        self.hidden_dim = hidden_dim
        self.n_hidden = n_hidden
        self.use_seve_head = use_seve_head
        self.use_lhuc_seve = use_lhuc_seve
        self.lhuc_sat = lhuc_sat
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.lhuc_lr = lhuc_lr

    def fit(self, X, y, *, mono=None, severity=None, speaker=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        if mono is None:
            mono = y // 3
        speakers = [] if speaker is None else sorted(set(speaker))
        spk_idx = None if speaker is None else np.array([speakers.index(s) for s in speaker])
        sev = None if severity is None else np.asarray(severity, dtype=int)
        data = FrameBatch(X, y, np.asarray(mono, dtype=int), sev, spk_idx, sev)
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed)
        self.loss_curve_ = []
        self.model_, self.lhuc_ = train_am(
            data, cfg, n_states=self.n_states, n_phones=self.n_phones,
            use_seve_head=self.use_seve_head, use_lhuc_seve=self.use_lhuc_seve,
            lhuc_sat=self.lhuc_sat, speakers=speakers, hidden_dim=self.hidden_dim,
            n_hidden=self.n_hidden, lhuc_lr=self.lhuc_lr, history=self.loss_curve_)
        self.classes_ = np.arange(self.n_states)
        self.priors_ = state_priors(y, self.n_states)
        return self

    def _conditions(self, n, speaker, severity):
        spk = sev = None
        if self.lhuc_ is not None:
            if speaker is not None:
                spk = np.array([self.lhuc_.speaker_index(s) if s in self.lhuc_.speakers else -1
                                for s in np.broadcast_to(np.asarray(speaker, dtype=object), n)])
            if severity is not None:
                sev = np.broadcast_to(np.asarray(severity, dtype=int), n).copy()
        return spk, sev

    def predict_proba(self, X, *, speaker=None, severity=None, head="tri"):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        spk, sev = self._conditions(len(X), speaker, severity)
        logits, _ = _forward(self.model_, X, self.lhuc_, spk, sev)
        return softmax(logits[head].output)

    def predict_log_proba(self, X, **kw):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        spk, sev = self._conditions(len(X), kw.get("speaker"), kw.get("severity"))
        logits, _ = _forward(self.model_, X, self.lhuc_, spk, sev)
        return log_softmax(logits[kw.get("head", "tri")].output)

    def predict(self, X, **kw):
        return np.argmax(self.predict_proba(X, **kw), axis=1)
