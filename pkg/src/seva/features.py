"""Acoustic front-end: STFT, log-mel filterbank + deltas, SVD spectral bases,
energy VAD and speed perturbation, plus the SEVF feature archive."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
FRAME_LENGTH_S = 0.025
FRAME_SHIFT_S = 0.010
N_MELS = 80
LOG_FLOOR = 1e-10

ARCHIVE_MAGIC = b"SEVF"
ARCHIVE_VERSION = 1


class FrontEndError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FrontEndError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise FrontEndError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # F x T
    frame_shift: float = FRAME_SHIFT_S
    frame_length: float = FRAME_LENGTH_S
    sample_rate: int = SAMPLE_RATE

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class SpectralBases:
    bases: np.ndarray  # k x F, rows are left singular vectors
    singular_values: np.ndarray

    def flatten(self) -> np.ndarray:
        return self.bases.reshape(-1)


def frame_params(sample_rate: int, frame_length_s: float, frame_shift_s: float):
    win = int(round(frame_length_s * sample_rate))
    hop = int(round(frame_shift_s * sample_rate))
    n_fft = 1 << max(0, int(np.ceil(np.log2(win))))
    return win, hop, n_fft


def num_frames(n_samples: int, sample_rate: int = SAMPLE_RATE,
               frame_length_s: float = FRAME_LENGTH_S,
               frame_shift_s: float = FRAME_SHIFT_S) -> int:
    win, hop, _ = frame_params(sample_rate, frame_length_s, frame_shift_s)
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def stft(w: Waveform, frame_length_s: float = FRAME_LENGTH_S,
         frame_shift_s: float = FRAME_SHIFT_S) -> Spectrogram:
    """Hann-windowed magnitude STFT; FFT size is the next power of two."""
    if not frame_length_s >= frame_shift_s > 0:
        raise FrontEndError("need frame_length >= frame_shift > 0")
    win, hop, n_fft = frame_params(w.sample_rate, frame_length_s, frame_shift_s)
    t = num_frames(len(w), w.sample_rate, frame_length_s, frame_shift_s)
    if t < 1:
        raise FrontEndError(f"utterance of {len(w)} samples is shorter than one frame")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:t]
    window = get_window("hann", win)
    mags = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1)).T
    return Spectrogram(mags, frame_shift_s, frame_length_s, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``n_mels x n_bins``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_hz = np.linspace(0.0, sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz - lo) / (mid - lo)
    down = (hi - bin_hz) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def deltas(feats: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas over +-``window`` frames (T x D), edges clamped."""
    t = feats.shape[0]
    padded = np.concatenate([np.repeat(feats[:1], window, axis=0), feats,
                             np.repeat(feats[-1:], window, axis=0)])
    denom = 2 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(feats)
    for n in range(1, window + 1):
        out += n * (padded[window + n:window + n + t] - padded[window - n:window - n + t])
    return out / denom


def fbank_delta(spec: Spectrogram, n_mels: int = N_MELS) -> np.ndarray:
    """Log-mel energies plus deltas, returned as ``T x 2*n_mels``."""
    if spec.n_bins < n_mels:
        raise FrontEndError(f"{spec.n_bins} bins cannot feed {n_mels} mel filters")
    fb = mel_filterbank(n_mels, spec.n_bins, spec.sample_rate)
    power = spec.magnitudes.T ** 2
    logmel = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    return np.hstack([logmel, deltas(logmel)])


def svd_spectral_bases(spec: Spectrogram | np.ndarray, k: int = 2) -> SpectralBases:
    """Top-``k`` left singular vectors of the F x T magnitude matrix.

    Signs are fixed so the largest-magnitude entry of each basis is positive.
    """
    m = spec.magnitudes if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=float)
    f, t = m.shape
    if t < k or f < k:
        raise FrontEndError(f"need at least {k} frames and bins, got {f}x{t}")
    if not np.any(m):
        raise FrontEndError("rank deficient: all-zero spectrogram")
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    bases = u[:, :k].T.copy()
    for row in bases:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return SpectralBases(bases, s[:k].copy())


def frame_energy_db(w: Waveform, frame_length_s: float = FRAME_LENGTH_S,
                    frame_shift_s: float = FRAME_SHIFT_S) -> np.ndarray:
    win, hop, _ = frame_params(w.sample_rate, frame_length_s, frame_shift_s)
    t = num_frames(len(w), w.sample_rate, frame_length_s, frame_shift_s)
    if t < 1:
        return np.full(1, 10 * np.log10(max(np.mean(w.samples ** 2), 1e-300)))
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:t]
    return 10 * np.log10(np.maximum(np.mean(frames ** 2, axis=1), 1e-300))


def energy_vad(w: Waveform, threshold_db: float = -40.0,
               frame_length_s: float = FRAME_LENGTH_S,
               frame_shift_s: float = FRAME_SHIFT_S) -> Waveform:
    """Strip leading/trailing frames quieter than ``threshold_db`` below the peak frame."""
    if not np.any(w.samples):
        raise FrontEndError("no speech detected")
    if threshold_db == -np.inf:
        return Waveform(w.samples.copy(), w.sample_rate)
    win, hop, _ = frame_params(w.sample_rate, frame_length_s, frame_shift_s)
    energy = frame_energy_db(w, frame_length_s, frame_shift_s)
    active = np.flatnonzero(energy >= energy.max() + threshold_db)
    if len(energy) == 1 or len(active) == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    first, last = active[0], active[-1]
    start = first * hop
    stop = len(w) if last == len(energy) - 1 else last * hop + win
    return Waveform(w.samples[start:stop].copy(), w.sample_rate)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample by linear interpolation; length becomes round(n / factor)."""
    if not 0.5 <= factor <= 2.0:
        raise FrontEndError(f"speed factor {factor} outside [0.5, 2.0]")
    n = len(w)
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(n / factor))
    pos = np.arange(n_out) * factor
    return Waveform(np.interp(pos, np.arange(n), w.samples), w.sample_rate)


# -- I/O -----------------------------------------------------------------------

def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FrontEndError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32767.0, rate)


def write_archive(fh: BinaryIO, items: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(items)
    fh.write(ARCHIVE_MAGIC)
    fh.write(struct.pack("<II", ARCHIVE_VERSION, len(items)))
    for utt_id, mat in items:
        mat = np.atleast_2d(np.asarray(mat))
        key = utt_id.encode("utf-8")
        fh.write(struct.pack("<I", len(key)))
        fh.write(key)
        fh.write(struct.pack("<II", *mat.shape))
        fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_archive(fh: BinaryIO) -> Iterator[tuple[str, np.ndarray]]:
    if fh.read(4) != ARCHIVE_MAGIC:
        raise FrontEndError("not a SEVF archive")
    version, count = struct.unpack("<II", fh.read(8))
    if version != ARCHIVE_VERSION:
        raise FrontEndError(f"unsupported archive version {version}")
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        utt_id = fh.read(n).decode("utf-8")
        t, d = struct.unpack("<II", fh.read(8))
        mat = np.frombuffer(fh.read(4 * t * d), dtype="<f4").reshape(t, d)
        yield utt_id, mat.astype(np.float64)


def save_archive(path, items) -> None:
    with open(path, "wb") as fh:
        write_archive(fh, items)


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return dict(read_archive(fh))
