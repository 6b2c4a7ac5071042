"""Experiment configuration, content-addressed stage artifacts and the
end-to-end recipe shared by the CLI subcommands and the ablation grid."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import itertools
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .adaptation import AdaptConfig, adapt_speaker, kld_finetune_by_severity, sat_train
from .corpus import Corpus, augment, generate_corpus, make_targets, read_manifest, write_manifest
from .decoder import NBestList, combine_systems, decode_nbest, read_nbest, write_nbest
from .embedder import (EmbedderNet, assess_severity, extract_aux, load_embedder, save_embedder,
                       train_embedder, write_assessments)
from .evaluate import ScoredResult, format_table, mapsswe, paired_errors, wer
from .features import N_MELS, fbank_delta, load_archive, save_archive, stft, svd_spectral_bases
from .hybrid_am import (FrameBatch, HybridDNN, LhucParams, forward_am, load_hybrid, save_hybrid,
                        state_priors, train_am, write_hybrid)
from .lexicon import Lexicon, default_word_list
from .netcore import TrainConfig
from .seqmodel import ctc_score, load_ctc_model, recognise, save_ctc_model, train_seq
from .severity import SeverityLevel

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    """Missing, stale or corrupted stage output."""


# -- configuration ---------------------------------------------------------------

@dataclass
class CorpusSection:
    speakers_per_severity: int = 4
    n_words: int = 30
    augment: bool = False


@dataclass
class FeatureSection:
    n_mels: int = N_MELS
    svd_k: int = 2


@dataclass
class EmbedderSection:
    epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 32


@dataclass
class AmSection:
    use_aux: bool = False
    use_seve_head: bool = False
    use_lhuc_seve: bool = False
    lhuc_sat: bool = False
    hidden_dim: int = 128
    n_hidden: int = 7
    epochs: int = 20
    learning_rate: float = 0.02
    batch_size: int = 64
    lhuc_lr: float = 0.5
    aux_noise: float = 2.0  # train-time aux jitter, in units of per-dim std


@dataclass
class AdaptationSection:
    method: str = "lhuc"  # lhuc: per-speaker r vectors on a SAT model; kld: per-severity copies
    lam: float = 0.5
    epochs: int = 10
    learning_rate: float = 1.0


@dataclass
class SeqSection:
    use_severity: bool = True
    hidden: list = field(default_factory=lambda: [256, 256])
    epochs: int = 20
    learning_rate: float = 0.01
    batch_size: int = 8
    fold_in_high_b2: bool = False


@dataclass
class DecodeSection:
    n: int = 50
    acoustic: str = "si"  # si | sat | kld
    weights: dict = field(default_factory=lambda: {"first_pass": 0.5, "ctc": 0.5})


@dataclass
class EvalSection:
    severity_source: str = "assessed"  # or oracle
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    am: AmSection = field(default_factory=AmSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    seq: SeqSection = field(default_factory=SeqSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


_CHOICES = {("adaptation", "method"): ("lhuc", "kld"),
            ("decode", "acoustic"): ("si", "sat", "kld"),
            ("eval", "severity_source"): ("assessed", "oracle")}


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, path)
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
        allowed = _CHOICES.get((where, name))
        if allowed and value not in allowed:
            raise ConfigError(f"{path}: must be one of {', '.join(allowed)}, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse a YAML experiment file; absent keys take defaults, unknown keys are errors."""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text or "") or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = _build(ExperimentConfig, data, "")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if not cfg.eval.seeds:
        raise ConfigError("eval.seeds must not be empty")
    if any(not isinstance(s, int) or s < 0 for s in cfg.eval.seeds):
        raise ConfigError("eval.seeds must be non-negative integers")
    if cfg.corpus.speakers_per_severity < 1 or cfg.corpus.n_words < 1:
        raise ConfigError("corpus needs at least one speaker per severity and one word")
    unknown = set(cfg.decode.weights) - {"first_pass", "ctc"}
    if unknown:
        raise ConfigError(f"decode.weights: unknown scorer(s) {', '.join(sorted(unknown))}")
    AdaptConfig(cfg.adaptation.lam, cfg.adaptation.epochs, cfg.adaptation.learning_rate)
    return cfg


# -- parallel map ------------------------------------------------------------------

_SHARED: dict = {}


def _init_worker(shared):
    _SHARED.clear()
    _SHARED.update(shared)


def _call(args):
    fn, item = args
    return fn(item, _SHARED)


def pmap(fn: Callable, items: Sequence, workers: int = 1, shared: Mapping | None = None) -> list:
    """Order-preserving map of ``fn(item, shared)``; results do not depend on ``workers``."""
    shared = dict(shared or {})
    if workers <= 1 or len(items) < 2:
        return [fn(item, shared) for item in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(shared,)) as ex:
        return list(ex.map(_call, [(fn, it) for it in items], chunksize=chunk))


# -- in-memory recipe ------------------------------------------------------------------

def _features_one(utt, shared):
    spec = stft(utt.waveform)
    return (fbank_delta(spec, shared["n_mels"]),
            svd_spectral_bases(spec, shared["svd_k"]).flatten())


def extract_features(corpus: Corpus, cfg: ExperimentConfig, workers: int = 1):
    """Per-utterance filter-bank+delta matrices and flattened spectral bases."""
    shared = {"n_mels": cfg.features.n_mels, "svd_k": cfg.features.svd_k}
    out = pmap(_features_one, corpus.utterances, workers, shared)
    ids = [u.utt_id for u in corpus.utterances]
    return dict(zip(ids, (o[0] for o in out))), dict(zip(ids, (o[1] for o in out)))


def make_corpus(cfg: ExperimentConfig, first_speaker_index: int = 0) -> Corpus:
    return generate_corpus(cfg.corpus.speakers_per_severity,
                           default_word_list(cfg.corpus.n_words), seed=cfg.seed,
                           first_speaker_index=first_speaker_index)


def fit_embedder(corpus: Corpus, bases: Mapping[str, np.ndarray], cfg: ExperimentConfig):
    train = corpus.split("train").utterances
    e = cfg.embedder
    return train_embedder(np.stack([bases[u.utt_id] for u in train]),
                          [int(u.severity) for u in train], [u.speaker_id for u in train],
                          TrainConfig(e.learning_rate, e.epochs, e.batch_size, cfg.seed))


def aux_vectors(net: EmbedderNet, bases: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    ids = sorted(bases)
    z = extract_aux(net, np.stack([bases[k] for k in ids]))
    return dict(zip(ids, z))


def assess_speakers(net: EmbedderNet, corpus: Corpus, bases: Mapping[str, np.ndarray]):
    """Speaker -> (assessed level, mean posterior) over that speaker's test utterances."""
    out = {}
    for spk, utts in sorted(corpus.split("test").by_speaker().items()):
        out[spk] = assess_severity(net, np.stack([bases[u.utt_id] for u in utts]))
    return out


def _with_aux(fbank: np.ndarray, aux: np.ndarray | None) -> np.ndarray:
    if aux is None:
        return fbank
    return np.hstack([fbank, np.broadcast_to(aux, (len(fbank), len(aux)))])


def frame_batch(utts, fbank, aux, speakers: Sequence[str] | None = None) -> FrameBatch:
    xs, tri, sev, spk = [], [], [], []
    for u in utts:
        f = fbank[u.utt_id]
        t = make_targets(u, len(f))
        xs.append(_with_aux(f, None if aux is None else aux[u.utt_id]))
        tri.append(t.tri_state)
        sev.append(np.full(len(f), t.severity))
        if speakers is not None:
            spk.append(np.full(len(f), speakers.index(u.speaker_id)))
    tri = np.concatenate(tri)
    sev = np.concatenate(sev)
    return FrameBatch(np.vstack(xs), tri, tri // 3, sev,
                      np.concatenate(spk) if speakers is not None else None, sev)


def jitter_aux(data: FrameBatch, aux_dim: int, scale: float, seed: int) -> FrameBatch:
    """Add per-frame Gaussian noise to the trailing ``aux_dim`` training columns.

    Constant per-utterance aux vectors otherwise let the network memorise
    training utterances.
    """
    if scale <= 0 or aux_dim == 0:
        return data
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    x = data.features.copy()
    a = x[:, -aux_dim:]
    x[:, -aux_dim:] = a + scale * a.std(axis=0) * rng.normal(size=a.shape)
    return FrameBatch(x, data.tri, data.mono, data.seve, data.speaker, data.severity)


def am_train_config(cfg: ExperimentConfig) -> TrainConfig:
    a = cfg.am
    return TrainConfig(a.learning_rate, a.epochs, a.batch_size, cfg.seed)


def _aux_dim(aux: Mapping[str, np.ndarray]) -> int:
    return len(next(iter(aux.values())))


def fit_am(corpus: Corpus, fbank, aux, cfg: ExperimentConfig, sat: bool = False):
    """Train the hybrid model on the train split; ``sat`` adds per-speaker r vectors."""
    a = cfg.am
    utts = corpus.split("train").utterances
    kw = dict(n_states=corpus.lexicon.n_states, n_phones=corpus.lexicon.n_phones,
              use_seve_head=a.use_seve_head, use_lhuc_seve=a.use_lhuc_seve,
              hidden_dim=a.hidden_dim, n_hidden=a.n_hidden, lhuc_lr=a.lhuc_lr)
    if sat:
        speakers = sorted({u.speaker_id for u in utts})
        data = frame_batch(utts, fbank, aux if a.use_aux else None, speakers)
        data = jitter_aux(data, _aux_dim(aux) if a.use_aux else 0, a.aux_noise, cfg.seed)
        model, lhuc = sat_train(data, am_train_config(cfg), speakers=speakers, **kw)
    else:
        data = frame_batch(utts, fbank, aux if a.use_aux else None)
        data = jitter_aux(data, _aux_dim(aux) if a.use_aux else 0, a.aux_noise, cfg.seed)
        model, lhuc = train_am(data, am_train_config(cfg), **kw)
    return model, lhuc, state_priors(data.tri, corpus.lexicon.n_states)


def _decode_one(utt, shared):
    models = shared["models"]
    model, lhuc = models.get(utt["model"], models[None])
    post = forward_am(model, utt["fbank"], utt["aux"], lhuc, utt["condition"])["tri"]
    return decode_nbest(post, shared["lexicon"], shared["n"], shared["priors"], utt["utt_id"])


def decode_corpus(corpus: Corpus, fbank, aux, models: Mapping, priors, severities: Mapping,
                  cfg: ExperimentConfig, workers: int = 1, use_aux: bool | None = None,
                  use_lhuc: str = "", per_severity: bool = False) -> list[NBestList]:
    """First-pass N-best lists for the test split.

    ``models`` maps a model key to ``(model, lhuc)``; key ``None`` is the
    default and with ``per_severity`` the key is the speaker's severity.
    ``use_lhuc`` is "", "seve", "spkr" or "both".
    """
    use_aux = cfg.am.use_aux if use_aux is None else use_aux
    items = []
    for u in corpus.split("test").utterances:
        sev = int(severities[u.speaker_id])
        spk = u.speaker_id if use_lhuc in ("spkr", "both") else None
        cond = None
        if use_lhuc:
            cond = (spk, sev if use_lhuc in ("seve", "both") else None)
        items.append({"utt_id": u.utt_id, "fbank": fbank[u.utt_id],
                      "aux": aux[u.utt_id] if use_aux else None, "condition": cond,
                      "model": sev if per_severity else None})
    shared = {"models": dict(models), "lexicon": corpus.lexicon, "n": cfg.decode.n,
              "priors": priors}
    return pmap(_decode_one, items, workers, shared)


def severity_map(corpus: Corpus, assessed: Mapping, source: str) -> dict[str, int]:
    if source == "oracle":
        return {s.speaker_id: int(s.severity) for s in corpus.speakers}
    return {spk: int(level) for spk, (level, _) in assessed.items()}


def score_hyps(corpus: Corpus, hyps: Mapping[str, str], prefix: str = "") -> ScoredResult:
    test = corpus.split("test").utterances
    return wer({prefix + u.utt_id: u.word for u in test},
               {prefix + k: v for k, v in hyps.items()},
               {prefix + u.utt_id: u.severity for u in test})


def seq_data(corpus: Corpus, fbank, cfg: ExperimentConfig):
    utts = list(corpus.split("train").utterances)
    if cfg.seq.fold_in_high_b2:
        utts += [u for u in corpus.split("test").utterances if u.severity == SeverityLevel.High]
    return ([fbank[u.utt_id] for u in utts], [corpus.lexicon.graphemes(u.word) for u in utts],
            [int(u.severity) for u in utts])


def fit_seq(corpus: Corpus, fbank, cfg: ExperimentConfig, use_severity: bool | None = None):
    s = cfg.seq
    feats, labels, sevs = seq_data(corpus, fbank, cfg)
    use = s.use_severity if use_severity is None else use_severity
    return train_seq(feats, labels, sevs, TrainConfig(s.learning_rate, s.epochs, s.batch_size,
                                                      cfg.seed),
                     vocab_size=corpus.lexicon.n_phones, use_severity=use,
                     hidden=tuple(s.hidden))


def _recognise_one(utt, shared):
    return recognise(shared["model"], utt[1], shared["lexicon"])[0]


def recognise_corpus(model, corpus: Corpus, fbank, workers: int = 1) -> dict[str, str]:
    test = corpus.split("test").utterances
    out = pmap(_recognise_one, [(u.utt_id, fbank[u.utt_id]) for u in test], workers,
               {"model": model, "lexicon": corpus.lexicon})
    return {u.utt_id: w for u, w in zip(test, out)}


def _rescore_one(item, shared):
    nb, feats = item
    model, lexicon = shared["model"], shared["lexicon"]
    best = combine_systems(nb, [("ctc", lambda w: ctc_score(model, feats, lexicon.graphemes(w)))],
                           shared["weights"])
    return nb, best.word


def rescore_corpus(nbests: Sequence[NBestList], model, lexicon: Lexicon, fbank,
                   weights: Mapping[str, float], workers: int = 1):
    items = [(nb, fbank[nb.utterance_id]) for nb in nbests]
    out = pmap(_rescore_one, items, workers,
               {"model": model, "lexicon": lexicon, "weights": dict(weights)})
    return [o[0] for o in out], {nb.utterance_id: w for nb, w in out}


# -- ablation grid ------------------------------------------------------------------

ABLATION_AXES = ("aux", "mtl", "lhuc")


def ablation_rows() -> list[tuple[str, dict]]:
    rows = []
    for flags in itertools.product((False, True), repeat=3):
        on = [name for name, f in zip(ABLATION_AXES, flags) if f]
        rows.append(("+".join(on) or "base", dict(zip(ABLATION_AXES, flags))))
    rows.sort(key=lambda r: (sum(r[1].values()), [not r[1][a] for a in ABLATION_AXES]))
    return rows


@dataclass
class AblationRun:
    seed: int
    assessed: dict
    assessment_accuracy: float
    results: dict  # row name -> ScoredResult with seed-prefixed ids
    oracle_results: dict  # lhuc rows decoded with oracle severities
    embedder: EmbedderNet | None = None
    models: dict = field(default_factory=dict)  # row name -> (model, lhuc, priors)


def ablation_seed(cfg: ExperimentConfig, seed: int, rows=None, workers: int = 1,
                  keep_models: bool = False) -> AblationRun:
    """One corpus, embedder and set of acoustic models; every row decoded on the test split."""
    cfg = cfg.with_seed(seed)
    corpus = make_corpus(cfg)
    fbank, bases = extract_features(corpus, cfg, workers)
    net = fit_embedder(corpus, bases, cfg)
    aux = aux_vectors(net, bases)
    assessed = assess_speakers(net, corpus, bases)
    truth = {s.speaker_id: int(s.severity) for s in corpus.speakers}
    acc = float(np.mean([int(assessed[s][0]) == truth[s] for s in assessed]))
    used = severity_map(corpus, assessed, cfg.eval.severity_source)
    results, oracle, kept = {}, {}, {}
    prefix = f"s{seed}/"
    for name, flags in rows or ablation_rows():
        am = dataclasses.replace(cfg.am, use_aux=flags["aux"], use_seve_head=flags["mtl"],
                                 use_lhuc_seve=flags["lhuc"], lhuc_sat=False)
        rcfg = dataclasses.replace(cfg, am=am)
        model, lhuc, priors = fit_am(corpus, fbank, aux, rcfg)
        if keep_models:
            kept[name] = (model, lhuc, priors)
        mode = "seve" if flags["lhuc"] else ""
        nbs = decode_corpus(corpus, fbank, aux, {None: (model, lhuc)}, priors, used, rcfg,
                            workers, use_lhuc=mode)
        results[name] = score_hyps(corpus, {nb.utterance_id: nb.best.word for nb in nbs}, prefix)
        if flags["lhuc"]:
            nbs = decode_corpus(corpus, fbank, aux, {None: (model, lhuc)}, priors, truth, rcfg,
                                workers, use_lhuc=mode)
            oracle[name] = score_hyps(corpus, {nb.utterance_id: nb.best.word for nb in nbs},
                                      prefix)
        log.info("seed %d %s WER %.2f", seed, name, results[name].wer())
    return AblationRun(seed, assessed, acc, results, oracle, net if keep_models else None, kept)


def pool(results: Iterable[ScoredResult]) -> ScoredResult:
    return ScoredResult([u for r in results for u in r.utterances])


def ablation_table(runs: Sequence[AblationRun], baseline: str = "base") -> tuple[str, dict]:
    """Pooled WER table with MAPSSWE marks against ``baseline``.

    A mark is ``*`` when the difference is significant at the 5% level.
    """
    names = list(runs[0].results)
    pooled = {n: pool(r.results[n] for r in runs) for n in names}
    rows, sig = [], {}
    for n in names:
        mark = ""
        if n != baseline:
            a, b = paired_errors(pooled[baseline], pooled[n])
            sig[n] = mapsswe(a, b)
            mark = f"p={sig[n].p_value:.4f}" + (" *" if sig[n].significant else "")
        rows.append((n, pooled[n], mark))
    return format_table(rows), {"pooled": pooled, "significance": sig}


# -- on-disk stages ----------------------------------------------------------------------

# each stage's hash covers these config sections plus its upstream hashes
STAGES = {
    "gen-corpus": ((), ("corpus",)),
    "extract": (("gen-corpus",), ("features",)),
    "train-embedder": (("extract",), ("embedder",)),
    "train-am": (("extract", "train-embedder"), ("am",)),
    "sat": (("extract", "train-embedder"), ("am",)),
    "adapt": (("extract", "train-embedder", "train-am", "sat"), ("adaptation", "eval")),
    "train-seq": (("extract",), ("seq",)),
    "decode": (("extract", "train-embedder", "train-am", "sat", "adapt"), ("decode", "eval")),
    "rescore": (("decode", "train-seq"), ("decode",)),
    "score": (("decode", "rescore"), ("eval",)),
}

STAMP = "stamp.json"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def upstream_of(stage: str, cfg: ExperimentConfig) -> tuple[str, ...]:
    """Upstream stages actually needed under ``cfg``."""
    ups = STAGES[stage][0]
    if stage == "adapt":
        ups = ("extract", "train-embedder", "sat" if cfg.adaptation.method == "lhuc"
               else "train-am")
    elif stage == "decode":
        ups = {"si": ("extract", "train-embedder", "train-am"),
               "sat": ("extract", "train-embedder", "sat", "adapt"),
               "kld": ("extract", "train-embedder", "train-am", "adapt")}[cfg.decode.acoustic]
    elif stage == "score":
        ups = ("decode", "rescore") if set(cfg.decode.weights) - {"first_pass"} else ("decode",)
    return ups


def stage_hash(stage: str, cfg: ExperimentConfig, _memo=None) -> str:
    memo = {} if _memo is None else _memo
    if stage not in memo:
        sections = {s: dataclasses.asdict(getattr(cfg, s)) for s in STAGES[stage][1]}
        ups = {u: stage_hash(u, cfg, memo) for u in upstream_of(stage, cfg)}
        memo[stage] = _digest({"stage": stage, "seed": cfg.seed, "sections": sections,
                               "upstream": ups})
    return memo[stage]


class RunDir:
    """``out/<stage>/<hash>/`` directories guarded by a stamp of file digests."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, stage: str) -> Path:
        return self.root / stage / stage_hash(stage, self.cfg)[:16]

    def begin(self, stage: str) -> Path:
        p = self.path(stage)
        if p.exists():
            shutil.rmtree(p)
        p.mkdir(parents=True)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.resolved.yaml").write_text(self.cfg.dump(), encoding="utf-8")
        return p

    def commit(self, stage: str) -> Path:
        p = self.path(stage)
        files = {f.relative_to(p).as_posix(): _file_digest(f) for f in sorted(p.rglob("*"))
                 if f.is_file() and f.name != STAMP}
        stamp = {"stage": stage, "hash": stage_hash(stage, self.cfg), "files": files,
                 "config": self.cfg.to_dict()}
        (p / STAMP).write_text(json.dumps(stamp, indent=1, sort_keys=True), encoding="utf-8")
        return p

    def require(self, stage: str) -> Path:
        p = self.path(stage)
        stamp_path = p / STAMP
        if not stamp_path.exists():
            others = [d.name for d in (self.root / stage).glob("*") if (d / STAMP).exists()] \
                if (self.root / stage).exists() else []
            why = (f"only stale outputs from a different config ({', '.join(sorted(others))})"
                   if others else "no outputs")
            raise ArtifactError(f"{stage}: {why} under {self.root}; run `seva {stage}` first")
        stamp = json.loads(stamp_path.read_text(encoding="utf-8"))
        if stamp.get("hash") != stage_hash(stage, self.cfg):
            raise ArtifactError(f"{stage}: stamp does not match the config; rerun `seva {stage}`")
        for name, digest in stamp["files"].items():
            f = p / name
            if not f.exists() or _file_digest(f) != digest:
                raise ArtifactError(f"{stage}: {name} changed since it was written; "
                                    f"rerun `seva {stage}`")
        return p


def _load_corpus(run: RunDir) -> Corpus:
    cfg = run.cfg
    corpus = read_manifest(run.require("gen-corpus") / "manifest.tsv",
                           Lexicon.from_spellings(default_word_list(cfg.corpus.n_words)))
    return corpus


def _load_features(run: RunDir):
    p = run.require("extract")
    return load_archive(p / "fbank.ark"), {k: v[0] for k, v in load_archive(p / "bases.ark").items()}


def _load_embedding(run: RunDir):
    p = run.require("train-embedder")
    aux = {k: v[0] for k, v in load_archive(p / "aux.ark").items()}
    assessed = {}
    for line in (p / "assessments.tsv").read_text(encoding="utf-8").splitlines():
        spk, level, post = line.split("\t")
        assessed[spk] = (SeverityLevel.parse(level), np.array([float(x) for x in post.split()]))
    return aux, assessed


def _save_model(path: Path, model, lhuc, priors) -> None:
    save_hybrid(path / "model.bin", model, lhuc)
    np.savetxt(path / "priors.txt", priors, fmt="%.17g")


def _load_model(path: Path):
    model, lhuc = load_hybrid(path / "model.bin")
    return model, lhuc, np.loadtxt(path / "priors.txt", ndmin=1)


def stage_gen_corpus(run: RunDir, workers: int = 1) -> Path:
    p = run.begin("gen-corpus")
    corpus = make_corpus(run.cfg)
    if run.cfg.corpus.augment:
        train = augment(corpus.split("train"))
        corpus = corpus.subset(train.utterances + corpus.split("test").utterances)
    write_manifest(corpus, p)
    return run.commit("gen-corpus")


def stage_extract(run: RunDir, workers: int = 1) -> Path:
    corpus = _load_corpus(run)
    fbank, bases = extract_features(corpus, run.cfg, workers)
    p = run.begin("extract")
    save_archive(p / "fbank.ark", fbank.items())
    save_archive(p / "bases.ark", bases.items())
    return run.commit("extract")


def stage_train_embedder(run: RunDir, workers: int = 1) -> Path:
    corpus = _load_corpus(run)
    _, bases = _load_features(run)
    net = fit_embedder(corpus, bases, run.cfg)
    assessed = assess_speakers(net, corpus, bases)
    p = run.begin("train-embedder")
    save_embedder(p / "embedder.bin", net)
    save_archive(p / "aux.ark", aux_vectors(net, bases).items())
    with open(p / "assessments.tsv", "w", encoding="utf-8") as fh:
        write_assessments(fh, [(s, lvl, post) for s, (lvl, post) in assessed.items()])
    return run.commit("train-embedder")


def _am_stage(run: RunDir, stage: str, sat: bool) -> Path:
    corpus = _load_corpus(run)
    fbank, _ = _load_features(run)
    aux, _ = _load_embedding(run)
    model, lhuc, priors = fit_am(corpus, fbank, aux, run.cfg, sat=sat)
    p = run.begin(stage)
    _save_model(p, model, lhuc, priors)
    return run.commit(stage)


def stage_train_am(run: RunDir, workers: int = 1) -> Path:
    return _am_stage(run, "train-am", sat=False)


def stage_sat(run: RunDir, workers: int = 1) -> Path:
    return _am_stage(run, "sat", sat=True)


def _test_inputs(run: RunDir, corpus: Corpus, fbank, aux, assessed):
    sev = severity_map(corpus, assessed, run.cfg.eval.severity_source)
    return sev, corpus.split("test").by_speaker()


def stage_adapt(run: RunDir, workers: int = 1) -> Path:
    cfg = run.cfg
    corpus = _load_corpus(run)
    fbank, _ = _load_features(run)
    aux, assessed = _load_embedding(run)
    sev, by_spk = _test_inputs(run, corpus, fbank, aux, assessed)
    ad = cfg.adaptation
    if ad.method == "lhuc":
        model, lhuc, priors = _load_model(run.require("sat"))
        acfg = AdaptConfig(ad.lam, ad.epochs, ad.learning_rate)
        rows = []
        for spk, utts in sorted(by_spk.items()):
            hist = []
            feats = [fbank[u.utt_id] for u in utts]
            a = [aux[u.utt_id] for u in utts] if cfg.am.use_aux else None
            lhuc = adapt_speaker(model, lhuc, feats, spk, sev[spk], acfg, a, hist)
            rows += [(e, spk, loss) for e, loss in hist]
        p = run.begin("adapt")
        _save_model(p, model, lhuc, priors)
        with open(p / "adapt_log.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{e}\t{s}\t{loss!r}\n" for e, s, loss in rows)
    else:
        si, _, priors = _load_model(run.require("train-am"))
        train = corpus.split("train").utterances
        data = frame_batch(train, fbank, aux if cfg.am.use_aux else None)
        tc = TrainConfig(cfg.am.learning_rate, ad.epochs, cfg.am.batch_size, cfg.seed)
        models = kld_finetune_by_severity(si, data, ad.lam, tc)
        p = run.begin("adapt")
        for level, m in sorted(models.items()):
            save_hybrid(p / f"model_{SeverityLevel(level).short}.bin", m)
        np.savetxt(p / "priors.txt", priors, fmt="%.17g")
    return run.commit("adapt")


def stage_train_seq(run: RunDir, workers: int = 1) -> Path:
    corpus = _load_corpus(run)
    fbank, _ = _load_features(run)
    model = fit_seq(corpus, fbank, run.cfg)
    p = run.begin("train-seq")
    save_ctc_model(p / "ctc.bin", model)
    return run.commit("train-seq")


def stage_decode(run: RunDir, workers: int = 1) -> Path:
    cfg = run.cfg
    corpus = _load_corpus(run)
    fbank, _ = _load_features(run)
    aux, assessed = _load_embedding(run)
    sev = severity_map(corpus, assessed, cfg.eval.severity_source)
    lhuc_mode = "seve" if cfg.am.use_lhuc_seve else ""
    per_sev = False
    if cfg.decode.acoustic == "si":
        model, lhuc, priors = _load_model(run.require("train-am"))
        models = {None: (model, lhuc)}
    elif cfg.decode.acoustic == "sat":
        if cfg.adaptation.method != "lhuc":
            raise ConfigError("decode.acoustic=sat needs adaptation.method=lhuc")
        model, lhuc, priors = _load_model(run.require("adapt"))
        models = {None: (model, lhuc)}
        lhuc_mode = "both" if cfg.am.use_lhuc_seve else "spkr"
    else:
        if cfg.adaptation.method != "kld":
            raise ConfigError("decode.acoustic=kld needs adaptation.method=kld")
        p = run.require("adapt")
        models = {int(lvl): (load_hybrid(p / f"model_{lvl.short}.bin")[0], None)
                  for lvl in SeverityLevel}
        _, lhuc, priors = _load_model(run.require("train-am"))
        models[None] = models[0]
        per_sev, lhuc_mode = True, ""
    nbs = decode_corpus(corpus, fbank, aux, models, priors, sev, cfg, workers,
                        use_lhuc=lhuc_mode, per_severity=per_sev)
    p = run.begin("decode")
    with open(p / "nbest.txt", "w", encoding="utf-8") as fh:
        write_nbest(fh, nbs)
    return run.commit("decode")


def stage_rescore(run: RunDir, workers: int = 1) -> Path:
    corpus = _load_corpus(run)
    fbank, _ = _load_features(run)
    with open(run.require("decode") / "nbest.txt", encoding="utf-8") as fh:
        nbs = read_nbest(fh)
    model = load_ctc_model(run.require("train-seq") / "ctc.bin")
    nbs, hyps = rescore_corpus(nbs, model, corpus.lexicon, fbank, run.cfg.decode.weights,
                               workers)
    p = run.begin("rescore")
    with open(p / "nbest.txt", "w", encoding="utf-8") as fh:
        write_nbest(fh, nbs)
    _write_hyps(p / "hyps.txt", hyps)
    return run.commit("rescore")


def _write_hyps(path: Path, hyps: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in sorted(hyps.items()))


def stage_score(run: RunDir, workers: int = 1) -> Path:
    corpus = _load_corpus(run)
    with open(run.require("decode") / "nbest.txt", encoding="utf-8") as fh:
        first = {nb.utterance_id: nb.best.word for nb in read_nbest(fh)}
    rows = [("first-pass", score_hyps(corpus, first), "")]
    if "rescore" in upstream_of("score", run.cfg):
        hyps = dict(line.split("\t") for line in
                    (run.require("rescore") / "hyps.txt").read_text("utf-8").splitlines())
        res = score_hyps(corpus, hyps)
        sig = mapsswe(*paired_errors(rows[0][1], res))
        rows.append(("rescored", res, f"p={sig.p_value:.4f}" + (" *" if sig.significant else "")))
    p = run.begin("score")
    (p / "results.txt").write_text(format_table(rows), encoding="utf-8")
    with open(p / "per_utt.csv", "w", encoding="utf-8", newline="") as fh:
        rows[-1][1].write_csv(fh)
    return run.commit("score")


def run_ablation(cfg: ExperimentConfig, out_dir, workers: int = 1) -> Path:
    """The 8-row option grid, pooled over ``eval.seeds``, written to ``out/ablate/<hash>/``."""
    out = Path(out_dir) / "ablate" / _digest({"stage": "ablate", "cfg": cfg.to_dict()})[:16]
    runs = [ablation_seed(cfg, s, workers=workers) for s in cfg.eval.seeds]
    table, _ = ablation_table(runs)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    Path(out_dir, "config.resolved.yaml").write_text(cfg.dump(), encoding="utf-8")
    (out / "config.resolved.yaml").write_text(cfg.dump(), encoding="utf-8")
    (out / "results.txt").write_text(table, encoding="utf-8")
    with open(out / "assessments.tsv", "w", encoding="utf-8") as fh:
        for r in runs:
            for spk, (lvl, _) in sorted(r.assessed.items()):
                fh.write(f"{r.seed}\t{spk}\t{SeverityLevel(lvl).short}\n")
    return out


STAGE_FUNCS = {
    "gen-corpus": stage_gen_corpus,
    "extract": stage_extract,
    "train-embedder": stage_train_embedder,
    "train-am": stage_train_am,
    "sat": stage_sat,
    "adapt": stage_adapt,
    "train-seq": stage_train_seq,
    "decode": stage_decode,
    "rescore": stage_rescore,
    "score": stage_score,
}
