import textwrap

import pytest
import yaml

from seva.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from seva import pipeline
from seva.evaluate import format_table
from seva.netcore import NumericError
from seva.pipeline import (ConfigError, ExperimentConfig, ablation_rows, load_config, make_corpus,
                           score_hyps)

TINY = textwrap.dedent("""\
    seed: 3
    corpus: {speakers_per_severity: 1, n_words: 4}
    embedder: {epochs: 5}
    am: {hidden_dim: 16, n_hidden: 2, epochs: 2, batch_size: 128, learning_rate: 0.05}
    adaptation: {epochs: 2}
    seq: {hidden: [16], epochs: 1, batch_size: 8}
    """)


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "exp.yaml"
    path.write_text(TINY)
    return path


def cli(*args):
    return main([str(a) for a in args])


def run_all(cfg, out, workers=1, stages=("gen-corpus", "extract", "train-embedder", "train-am",
                                          "train-seq", "decode", "rescore", "score")):
    for stage in stages:
        assert cli(stage, "--config", cfg, "--out", out, "--workers", workers) == EXIT_OK, stage


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_all(tiny_cfg, out)
    return out


def results_of(out, stage="score"):
    (d,) = (out / stage).iterdir()
    return (d / "results.txt").read_bytes()


def test_config_defaults_and_unknown_keys():
    cfg = load_config(text="")
    assert cfg == ExperimentConfig()
    assert cfg.am.learning_rate == 0.02 and cfg.decode.n == 50 and cfg.adaptation.lam == 0.5
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(text="am: {use_aux: true, colour: red}")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(text="bogus: 1")
    with pytest.raises(ConfigError, match="expected bool"):
        load_config(text="am: {use_aux: 1}")
    with pytest.raises(ConfigError, match="must be one of"):
        load_config(text="decode: {acoustic: gmm}")
    with pytest.raises(ConfigError):
        load_config(text="decode: {weights: {first_pass: 0.5, lm: 0.5}}")
    assert load_config(text="am: {learning_rate: 1}").am.learning_rate == 1.0


def test_full_pipeline_records_config(tiny_run, tiny_cfg):
    table = results_of(tiny_run).decode()
    assert table.splitlines()[0].split()[:6] == ["Sys", "VL", "L", "M", "H", "All"]
    assert [line.split()[0] for line in table.splitlines()[1:]] == ["first-pass", "rescored"]
    resolved = yaml.safe_load((tiny_run / "config.resolved.yaml").read_text())
    assert resolved["seed"] == 3 and resolved["corpus"]["n_words"] == 4
    assert resolved["decode"]["n"] == 50  # defaults written out in full


def test_rerun_is_byte_identical_across_workers(tiny_run, tiny_cfg, tmp_path):
    run_all(tiny_cfg, tmp_path, workers=2)
    assert results_of(tmp_path) == results_of(tiny_run)
    for stage in ("decode", "rescore"):
        (a,) = (tmp_path / stage).iterdir()
        (b,) = (tiny_run / stage).iterdir()
        assert (a / "nbest.txt").read_bytes() == (b / "nbest.txt").read_bytes()


def test_missing_upstream_names_producer(tiny_cfg, tmp_path, capsys):
    assert cli("extract", "--config", tiny_cfg, "--out", tmp_path) == EXIT_DATA
    assert "seva gen-corpus" in capsys.readouterr().err
    run_all(tiny_cfg, tmp_path, stages=("gen-corpus", "extract", "train-embedder"))
    assert cli("decode", "--config", tiny_cfg, "--out", tmp_path) == EXIT_DATA
    assert "seva train-am" in capsys.readouterr().err


def test_stale_and_tampered_artifacts_refused(tiny_cfg, tmp_path, capsys):
    run_all(tiny_cfg, tmp_path, stages=("gen-corpus", "extract", "train-embedder", "train-am"))
    changed = tmp_path / "changed.yaml"
    changed.write_text(TINY.replace("epochs: 2, batch", "epochs: 3, batch"))
    assert cli("decode", "--config", changed, "--out", tmp_path) == EXIT_DATA
    assert "stale" in capsys.readouterr().err
    # the seed override changes every stage hash
    assert cli("extract", "--config", tiny_cfg, "--out", tmp_path, "--seed", 4) == EXIT_DATA
    (d,) = (tmp_path / "train-am").iterdir()
    with open(d / "priors.txt", "a") as fh:
        fh.write("0\n")
    assert cli("decode", "--config", tiny_cfg, "--out", tmp_path) == EXIT_DATA
    assert "changed since" in capsys.readouterr().err


def test_sat_adapt_and_kld_paths(tiny_cfg, tmp_path):
    run_all(tiny_cfg, tmp_path, stages=("gen-corpus", "extract", "train-embedder", "sat",
                                        "adapt"))
    sat_cfg = tmp_path / "sat.yaml"
    sat_cfg.write_text(TINY + "decode: {acoustic: sat, weights: {first_pass: 1.0}}\n")
    # a different decode section leaves upstream hashes intact
    run_all(sat_cfg, tmp_path, stages=("decode", "score"))
    (d,) = (tmp_path / "adapt").iterdir()
    log = (d / "adapt_log.tsv").read_text().splitlines()
    assert len(log) == 4 * 3  # four test speakers, epochs 0..2
    kld_cfg = tmp_path / "kld.yaml"
    kld_cfg.write_text(TINY + "adaptation: {method: kld, epochs: 1}\n"
                              "decode: {acoustic: kld, weights: {first_pass: 1.0}}\n")
    run_all(kld_cfg, tmp_path, stages=("gen-corpus", "extract", "train-embedder", "train-am",
                                       "adapt", "decode", "score"))


def test_exit_codes(tiny_cfg, tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as exc:
        cli("frobnicate", "--out", tmp_path)
    assert exc.value.code == EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("am: {nope: 1}\n")
    assert cli("gen-corpus", "--config", bad, "--out", tmp_path) == EXIT_USAGE
    assert cli("gen-corpus", "--config", tmp_path / "missing.yaml", "--out", tmp_path) \
        == EXIT_USAGE
    assert cli("gen-corpus", "--out", tmp_path, "--workers", 0) == EXIT_USAGE
    run_all(tiny_cfg, tmp_path, stages=("gen-corpus", "extract", "train-embedder"))

    def diverge(*args, **kwargs):
        raise NumericError("non-finite training loss")
    monkeypatch.setattr(pipeline, "train_am", diverge)
    assert cli("train-am", "--config", tiny_cfg, "--out", tmp_path) == EXIT_NUMERIC


def test_score_identical_is_zero():
    corpus = make_corpus(load_config(text="corpus: {speakers_per_severity: 1, n_words: 3}"))
    perfect = {u.utt_id: u.word for u in corpus.split("test").utterances}
    table = format_table([("ref", score_hyps(corpus, perfect), "")])
    assert table.splitlines()[1].split()[1:] == ["0.00"] * 5


def test_ablation_grid_shape(tiny_cfg, tmp_path):
    names = [n for n, _ in ablation_rows()]
    assert names[0] == "base" and len(names) == 8 and names[-1] == "aux+mtl+lhuc"
    assert cli("ablate", "--config", tiny_cfg, "--out", tmp_path) == EXIT_OK
    (d,) = (tmp_path / "ablate").iterdir()
    lines = (d / "results.txt").read_text().splitlines()
    assert len(lines) == 9
    assert all("p=" in line for line in lines[2:])
    first = (d / "results.txt").read_bytes()
    assert cli("ablate", "--config", tiny_cfg, "--out", tmp_path, "--workers", 2) == EXIT_OK
    assert (d / "results.txt").read_bytes() == first
