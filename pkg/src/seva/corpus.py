"""Synthetic severity-stratified isolated-word corpus.

Each word is rendered as a chain of harmonic-stack phone units shaped by two
formants. Impairment severity controls tempo, formant centralisation and
jitter, additive noise and amplitude tremor; speakers add a pitch, per-phone
formant offsets and a channel gain. Phone segmentations are kept, so frame
targets come for free.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import (FRAME_LENGTH_S, FRAME_SHIFT_S, SAMPLE_RATE, Waveform, frame_params,
                       num_frames, read_wav, speed_perturb, write_wav)
from .lexicon import PHONE_FORMANTS, PHONES, STATES_PER_PHONE, Lexicon
from .severity import SeverityLevel

BLOCKS = ("B1", "B2", "B3")
TRAIN_BLOCKS = ("B1", "B3")
TEST_BLOCKS = ("B2",)
NEUTRAL_FORMANTS = np.array([500.0, 1500.0])
BASE_PHONE_S = 0.08


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SeverityProfile:
    tempo_stretch: float
    formant_jitter_std: float
    noise_snr_db: float
    amplitude_tremor_depth: float
    formant_centralization: float

    def more_impaired_than(self, other: "SeverityProfile") -> bool:
        return (self.tempo_stretch > other.tempo_stretch
                and self.formant_jitter_std > other.formant_jitter_std
                and self.noise_snr_db < other.noise_snr_db
                and self.amplitude_tremor_depth > other.amplitude_tremor_depth
                and self.formant_centralization > other.formant_centralization)


# Tuning knobs for the synthetic task, not measurements of dysarthric speech.
DEFAULT_PROFILES = {
    SeverityLevel.VeryLow: SeverityProfile(1.8, 130.0, 10.0, 0.5, 0.50),
    SeverityLevel.Low: SeverityProfile(1.5, 90.0, 14.0, 0.3, 0.33),
    SeverityLevel.Mid: SeverityProfile(1.25, 55.0, 18.0, 0.15, 0.17),
    SeverityLevel.High: SeverityProfile(1.05, 25.0, 23.0, 0.05, 0.02),
}


@dataclass
class SynthSpeaker:
    speaker_id: str
    severity: SeverityLevel
    base_pitch: float
    formant_offsets: np.ndarray  # n_phones x 2, Hz
    channel_gain: float

    def __post_init__(self):
        if not 80.0 <= self.base_pitch <= 300.0:
            raise CorpusError(f"base pitch {self.base_pitch} outside [80, 300] Hz")


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    severity: SeverityLevel
    word: str
    block: str
    waveform: Waveform
    segmentation: list[tuple[int, int, int]]  # (phone index, start sample, end sample)

    def tiles(self) -> bool:
        if not self.segmentation:
            return False
        ends = [s[2] for s in self.segmentation[:-1]]
        starts = [s[1] for s in self.segmentation[1:]]
        return (self.segmentation[0][1] == 0 and ends == starts
                and self.segmentation[-1][2] == len(self.waveform)
                and all(s[1] < s[2] for s in self.segmentation))


@dataclass
class Corpus:
    speakers: list[SynthSpeaker]
    utterances: list[Utterance]
    lexicon: Lexicon
    seed: int = 0
    _by_id: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self._by_id = {u.utt_id: u for u in self.utterances}
        if len(self._by_id) != len(self.utterances):
            raise CorpusError("duplicate utterance ids")

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self._by_id[utt_id]

    def speaker(self, speaker_id: str) -> SynthSpeaker:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def subset(self, utterances: Iterable[Utterance]) -> "Corpus":
        utts = list(utterances)
        keep = {u.speaker_id for u in utts}
        return Corpus([s for s in self.speakers if s.speaker_id in keep], utts,
                      self.lexicon, self.seed)

    def split(self, name: str) -> "Corpus":
        blocks = {"train": TRAIN_BLOCKS, "test": TEST_BLOCKS}[name]
        return self.subset(u for u in self.utterances if u.block in blocks)

    def by_speaker(self) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out


def _speaker_seed(seed: int, severity: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, severity, index]))


def _utterance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, index]))


def make_speaker(severity: SeverityLevel, index: int, seed: int) -> SynthSpeaker:
    rng = _speaker_seed(seed, int(severity), index)
    return SynthSpeaker(
        speaker_id=f"{severity.short}{index + 1:02d}",
        severity=severity,
        base_pitch=float(rng.uniform(90.0, 250.0)),
        formant_offsets=rng.normal(0.0, 60.0, size=(len(PHONES), 2)),
        channel_gain=float(rng.uniform(0.3, 0.8)),
    )


def render_word(phones: Sequence[int], speaker: SynthSpeaker, profile: SeverityProfile,
                rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                noise: bool = True) -> tuple[Waveform, list[tuple[int, int, int]]]:
    durations = [BASE_PHONE_S * profile.tempo_stretch * rng.uniform(0.85, 1.15) for _ in phones]
    bounds = np.round(np.cumsum([0.0] + durations) * sample_rate).astype(int)
    n = int(bounds[-1])
    segmentation = [(int(p), int(bounds[i]), int(bounds[i + 1])) for i, p in enumerate(phones)]

    targets = []
    for p in phones:
        f = PHONE_FORMANTS[p] + speaker.formant_offsets[p]
        f = f + profile.formant_centralization * (NEUTRAL_FORMANTS - f)
        targets.append(f + rng.normal(0.0, profile.formant_jitter_std, size=2))
    formants = np.empty((n, 2))
    prev = NEUTRAL_FORMANTS
    for (p, a, b), tgt in zip(segmentation, targets):
        glide = max(1, int(0.3 * (b - a)))
        ramp = np.linspace(0.0, 1.0, glide, endpoint=False)[:, None]
        formants[a:a + glide] = prev + ramp * (tgt - prev)
        formants[a + glide:b] = tgt
        prev = tgt

    t = np.arange(n) / sample_rate
    f0 = speaker.base_pitch * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t
                                                    + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(4000.0 // speaker.base_pitch)
    harm = np.arange(1, n_harm + 1)[:, None]
    freqs = harm * f0[None, :]
    amp = (np.exp(-0.5 * ((freqs - formants[None, :, 0]) / 150.0) ** 2)
           + 0.7 * np.exp(-0.5 * ((freqs - formants[None, :, 1]) / 200.0) ** 2) + 0.01)
    x = (amp * np.sin(harm * phase[None, :])).sum(axis=0)

    ramp_len = min(n // 4, int(0.01 * sample_rate))
    env = np.ones(n)
    if ramp_len > 0:
        env[:ramp_len] = np.linspace(0.0, 1.0, ramp_len)
        env[-ramp_len:] = np.linspace(1.0, 0.0, ramp_len)
    tremor = 1.0 - profile.amplitude_tremor_depth * 0.5 * (
        1.0 + np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi)))
    x = x * env * tremor
    x = speaker.channel_gain * x / np.max(np.abs(x))

    snr_db = profile.noise_snr_db + rng.normal(0.0, 1.0)
    noise_std = np.sqrt(np.mean(x ** 2) / 10 ** (snr_db / 10))
    eps = rng.normal(0.0, 1.0, size=n)
    if noise:
        x = x + noise_std * eps
    peak = np.max(np.abs(x))
    if peak > 0.999:
        x = x * (0.999 / peak)
    return Waveform(x, sample_rate), segmentation


def generate_corpus(n_speakers_per_severity: int = 4, word_list: Sequence[str] | None = None,
                    seed: int = 0, profiles=None, blocks: Sequence[str] = BLOCKS,
                    first_speaker_index: int = 0, noise: bool = True) -> Corpus:
    """Render every word once per speaker per block, deterministically under ``seed``."""
    from .lexicon import default_word_list
    if word_list is None:
        word_list = default_word_list()
    if len(word_list) == 0:
        raise CorpusError("word list is empty")
    if n_speakers_per_severity < 1:
        raise CorpusError("need at least one speaker per severity")
    profiles = DEFAULT_PROFILES if profiles is None else profiles
    lexicon = Lexicon.from_spellings(list(word_list))
    speakers = [make_speaker(sev, first_speaker_index + i, seed)
                for sev in SeverityLevel for i in range(n_speakers_per_severity)]
    utterances = []
    for spk in speakers:
        for block in blocks:
            for word in word_list:
                rng = _utterance_rng(seed, utterance_key(spk.speaker_id, block, word))
                wav, seg = render_word(lexicon.entries[word], spk, profiles[spk.severity], rng,
                                       noise=noise)
                utterances.append(Utterance(f"{spk.speaker_id}_{block}_{word}", spk.speaker_id,
                                            spk.severity, word, block, wav, seg))
    return Corpus(speakers, utterances, lexicon, seed)


def utterance_key(speaker_id: str, block: str, word: str) -> int:
    """Stable per-utterance substream key (independent of generation order)."""
    key = f"{speaker_id}|{block}|{word}".encode("utf-8")
    h = 1469598103934665603
    for byte in key:  # FNV-1a, 64 bit
        h = ((h ^ byte) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class FrameTargets:
    tri_state: np.ndarray
    monophone: np.ndarray
    severity: int

    def __len__(self) -> int:
        return len(self.tri_state)


def make_targets(utt: Utterance, n_frames: int | None = None,
                 frame_length_s: float = FRAME_LENGTH_S,
                 frame_shift_s: float = FRAME_SHIFT_S) -> FrameTargets:
    """Tri-state per frame from segmentation thirds (frame centre decides the phone)."""
    if not utt.segmentation:
        raise CorpusError(f"{utt.utt_id}: no segmentation")
    sr = utt.waveform.sample_rate
    win, hop, _ = frame_params(sr, frame_length_s, frame_shift_s)
    t = num_frames(len(utt.waveform), sr, frame_length_s, frame_shift_s) if n_frames is None \
        else n_frames
    if t < 1:
        raise CorpusError(f"{utt.utt_id}: shorter than one frame")
    centres = np.minimum(np.arange(t) * hop + win // 2, len(utt.waveform) - 1)
    ends = np.array([s[2] for s in utt.segmentation])
    seg_idx = np.minimum(np.searchsorted(ends, centres, side="right"), len(ends) - 1)
    tri = np.empty(t, dtype=int)
    for j, (phone, _, _) in enumerate(utt.segmentation):
        frames = np.flatnonzero(seg_idx == j)
        if len(frames) == 0:
            continue
        k = len(frames)
        state = np.minimum(STATES_PER_PHONE - 1, (STATES_PER_PHONE * np.arange(k)) // k)
        tri[frames] = phone * STATES_PER_PHONE + state
    return FrameTargets(tri, tri // STATES_PER_PHONE, int(utt.severity))


def augment(corpus: Corpus, factors: Sequence[float] = (0.9, 1.0, 1.1)) -> Corpus:
    """Speed-perturbed copies of every utterance, ids suffixed with ``-sp<factor>``."""
    out = []
    for f in factors:
        for u in corpus.utterances:
            wav = speed_perturb(u.waveform, f)
            n = len(wav)
            seg = []
            for j, (p, a, b) in enumerate(u.segmentation):
                a2 = int(round(a / f))
                b2 = n if j == len(u.segmentation) - 1 else int(round(b / f))
                seg.append((p, a2, b2))
            out.append(replace(u, utt_id=f"{u.utt_id}-sp{f:g}", waveform=wav, segmentation=seg))
    return Corpus(list(corpus.speakers), out, corpus.lexicon, corpus.seed)


# -- manifest ------------------------------------------------------------------

MANIFEST_FIELDS = ("utt_id", "speaker", "severity", "word", "block", "wav_path", "segmentation")


def write_manifest(corpus: Corpus, out_dir, wav_subdir: str = "wav") -> Path:
    out_dir = Path(out_dir)
    (out_dir / wav_subdir).mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.tsv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for u in corpus.utterances:
            rel = f"{wav_subdir}/{u.utt_id}.wav"
            write_wav(out_dir / rel, u.waveform)
            seg = ",".join(f"{PHONES[p]}:{a}:{b}" for p, a, b in u.segmentation)
            fh.write("\t".join([u.utt_id, u.speaker_id, u.severity.short, u.word, u.block,
                                rel, seg]) + "\n")
    return path


def read_manifest(path, lexicon: Lexicon | None = None) -> Corpus:
    path = Path(path)
    phone_index = {p: i for i, p in enumerate(PHONES)}
    utts = []
    speakers: dict[str, SeverityLevel] = {}
    words: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            utt_id, spk, sev, word, block, rel, seg = row
            level = SeverityLevel.parse(sev)
            segmentation = []
            for item in seg.split(","):
                p, a, b = item.split(":")
                segmentation.append((phone_index[p], int(a), int(b)))
            utts.append(Utterance(utt_id, spk, level, word, block,
                                  read_wav(path.parent / rel), segmentation))
            speakers.setdefault(spk, level)
            if word not in words:
                words.append(word)
    if lexicon is None:
        lexicon = Lexicon.from_spellings(words)
    spk_objs = [SynthSpeaker(s, lvl, 100.0, np.zeros((len(PHONES), 2)), 1.0)
                for s, lvl in speakers.items()]
    return Corpus(spk_objs, utts, lexicon)
