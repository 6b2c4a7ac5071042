import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from seva.corpus import (DEFAULT_PROFILES, CorpusError, SynthSpeaker, Utterance, augment,
                         generate_corpus, make_targets, read_manifest, write_manifest)
from seva.features import Waveform, num_frames, stft
from seva.lexicon import PHONES, default_word_list
from seva.severity import SeverityLevel

WORDS = default_word_list()[:6]


@pytest.fixture(scope="module")
def small():
    return generate_corpus(1, WORDS, seed=3)


def test_profiles_strictly_ordered():
    levels = list(SeverityLevel)
    for worse, better in zip(levels, levels[1:]):
        assert DEFAULT_PROFILES[worse].more_impaired_than(DEFAULT_PROFILES[better])


def test_pitch_bounds():
    with pytest.raises(CorpusError):
        SynthSpeaker("x", SeverityLevel.Mid, 50.0, np.zeros((12, 2)), 0.5)


def test_deterministic(small):
    again = generate_corpus(1, WORDS, seed=3)
    for a, b in zip(small.utterances, again.utterances):
        assert a.utt_id == b.utt_id
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)


def test_structure(small):
    assert len(small) == 4 * 3 * len(WORDS)
    train, test = small.split("train"), small.split("test")
    assert {u.block for u in train.utterances} == {"B1", "B3"}
    assert {u.block for u in test.utterances} == {"B2"}
    assert not {u.utt_id for u in train.utterances} & {u.utt_id for u in test.utterances}
    for u in small.utterances:
        assert u.tiles()
        assert np.all(np.isfinite(u.waveform.samples))
        assert np.max(np.abs(u.waveform.samples)) <= 1.0
    with pytest.raises(CorpusError):
        generate_corpus(1, [], seed=0)


def test_vl_slower_than_high(small):
    for word in WORDS:
        vl = small[f"VL01_B1_{word}"]
        hi = small[f"H01_B1_{word}"]
        assert len(vl.waveform) >= len(hi.waveform)


def test_severity_distortions_stochastically_ordered():
    words = default_word_list()
    corpus = generate_corpus(1, words, seed=5, blocks=("B1", "B2", "B3", "B4"))
    clean = generate_corpus(1, words, seed=5, blocks=("B1", "B2", "B3", "B4"), noise=False)
    stats = {lvl: {"dur": [], "snr": []} for lvl in SeverityLevel}
    for u, c in zip(corpus.utterances, clean.utterances):
        noise = u.waveform.samples - c.waveform.samples
        snr = 10 * np.log10(np.mean(c.waveform.samples ** 2) / np.mean(noise ** 2))
        stats[u.severity]["dur"].append(len(u.waveform) / len(corpus.lexicon.entries[u.word]))
        stats[u.severity]["snr"].append(snr)
    levels = list(SeverityLevel)
    for worse, better in zip(levels, levels[1:]):
        assert len(stats[worse]["dur"]) >= 100
        assert mannwhitneyu(stats[worse]["dur"], stats[better]["dur"],
                            alternative="greater").pvalue < 0.01
        assert mannwhitneyu(stats[worse]["snr"], stats[better]["snr"],
                            alternative="less").pvalue < 0.01


def one_phone_utt(n_samples):
    return Utterance("u", "s", SeverityLevel.Mid, "w", "B1", Waveform(np.zeros(n_samples)),
                     [(4, 0, n_samples)])


def test_targets_thirds_rule():
    utt = one_phone_utt(400 + 2 * 160)
    t = make_targets(utt)
    assert len(t) == 3
    assert t.tri_state.tolist() == [12, 13, 14]
    assert t.monophone.tolist() == [4, 4, 4]
    assert t.severity == 2


def test_targets_follow_frontend_length(small):
    for u in small.utterances[:20]:
        t = make_targets(u)
        assert len(t) == stft(u.waveform).n_frames == num_frames(len(u.waveform))
        np.testing.assert_array_equal(t.monophone, t.tri_state // 3)
        assert len(make_targets(u, len(t) + 1)) == len(t) + 1


def test_augment(small):
    sub = small.subset(small.utterances[:5])
    same = augment(sub, [1.0])
    for a, b in zip(sub.utterances, same.utterances):
        assert b.utt_id == a.utt_id + "-sp1"
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
        assert a.segmentation == b.segmentation
    tripled = augment(sub)
    assert len(tripled) == 3 * len(sub)
    assert all(u.tiles() for u in tripled.utterances)


def test_manifest_roundtrip(small, tmp_path):
    sub = small.subset(small.utterances[:4])
    path = write_manifest(sub, tmp_path)
    back = read_manifest(path)
    assert [u.utt_id for u in back.utterances] == [u.utt_id for u in sub.utterances]
    for a, b in zip(sub.utterances, back.utterances):
        assert a.segmentation == b.segmentation and a.severity == b.severity
        np.testing.assert_allclose(a.waveform.samples, b.waveform.samples, atol=1 / 32767)
    first = path.read_text().splitlines()[0].split("\t")
    assert first[2] in ("VL", "L", "M", "H")
    assert first[6].split(",")[0].split(":")[0] in PHONES
