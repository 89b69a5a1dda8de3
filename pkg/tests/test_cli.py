import csv
import json

import pytest

from streamrq.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, _int_list, _left_list, main, parse_args
from streamrq.corpus import read_manifest
from streamrq.frontend import save_wav


def test_unknown_command():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_required_flag():
    assert main(["decode", "--ckpt", "x"]) == EXIT_USAGE


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK


def test_missing_checkpoint_is_data_error(corpus, tmp_path):
    assert main(["decode", "--ckpt", str(tmp_path / "none.ckpt"), "--manifest", str(corpus)]) == EXIT_DATA


def test_context_conflict(corpus, probe_ckpt):
    assert main(["evaluate", "--ckpt", str(probe_ckpt), "--manifest", str(corpus),
                 "--context", "full", "--chunk-size", "8"]) == EXIT_USAGE


def test_streaming_needs_chunk(corpus, probe_ckpt):
    assert main(["evaluate", "--ckpt", str(probe_ckpt), "--manifest", str(corpus), "--streaming"]) == EXIT_USAGE


def test_bad_wav_is_data_error(probe_ckpt, tmp_path):
    bad = tmp_path / "x.wav"
    save_wav(bad, [0.0] * 100, sample_rate=8000)
    assert main(["stream", "--ckpt", str(probe_ckpt), "--wav", str(bad), "--chunk-size", "8"]) == EXIT_DATA


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[global]\nseed = 5\n\n[sweep]\nchunk_sizes = 4,8\nworkers = 2\n")
    args = parse_args(["--config", str(cfg), "sweep", "--ckpt", "a", "--manifest", "b", "--out", "c"])
    assert (args.seed, args.workers) == (5, 2)
    assert _int_list(args.chunk_sizes) == [4, 8]
    args = parse_args(["sweep", "--config", str(cfg), "--ckpt", "a", "--manifest", "b", "--out", "c",
                       "--workers", "3"])
    assert args.workers == 3


def test_list_flags():
    assert _int_list("8, 16,32") == [8, 16, 32]
    assert _left_list("1,full") == [1, None] and _left_list(("2", "full")) == [2, None]


def test_missing_config_is_usage_error(tmp_path):
    assert main(["--config", str(tmp_path / "nope.ini"), "synth-corpus", "--out", str(tmp_path)]) == EXIT_USAGE


def test_synth_and_lm(tmp_path, capsys):
    assert main(["synth-corpus", "--out", str(tmp_path / "c"), "--n", "3", "--seed", "2"]) == EXIT_OK
    entries = read_manifest(tmp_path / "c" / "manifest.jsonl")
    assert len(entries) == 3
    text = tmp_path / "t.txt"
    text.write_text("\n".join(e.text for e in entries))
    assert main(["lm-train", "--text", str(text), "--out", str(tmp_path / "lm.arpa")]) == EXIT_OK
    assert (tmp_path / "lm.arpa").read_text().lstrip().startswith("\\data\\")


def test_decode_evaluate_stream_sweep(corpus, probe_ckpt, tmp_path, capsys):
    hyps = tmp_path / "h.jsonl"
    assert main(["decode", "--ckpt", str(probe_ckpt), "--manifest", str(corpus), "--out", str(hyps),
                 "--chunk-size", "4", "--left-chunks", "2"]) == EXIT_OK
    rows = [json.loads(l) for l in hyps.read_text().splitlines()]
    assert len(rows) == len(read_manifest(corpus)) and all("text" in r for r in rows)

    report = tmp_path / "r.txt"
    assert main(["evaluate", "--ckpt", str(probe_ckpt), "--manifest", str(corpus), "--chunk-size", "8",
                 "--streaming", "--report", str(report)]) == EXIT_OK
    assert "WER %" in report.read_text()

    wav = read_manifest(corpus)[0].audio
    capsys.readouterr()
    assert main(["stream", "--ckpt", str(probe_ckpt), "--wav", wav, "--chunk-size", "8",
                 "--left-chunks", "2", "--pushes-ms", "50"]) == EXIT_OK
    out = capsys.readouterr().out
    assert json.loads(out.splitlines()[-1].split("latency: ")[1])["algorithmic_ms"] == 320

    csv_path = tmp_path / "s.csv"
    assert main(["sweep", "--ckpt", str(probe_ckpt), "--manifest", str(corpus), "--chunk-sizes", "8,32",
                 "--left-contexts", "1,full", "--out", str(csv_path)]) == EXIT_OK
    with open(csv_path) as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_lm_fusion_flags(corpus, probe_ckpt, tmp_path):
    text = tmp_path / "t.txt"
    text.write_text("\n".join(e.text for e in read_manifest(corpus)))
    main(["lm-train", "--text", str(text), "--out", str(tmp_path / "lm.arpa")])
    assert main(["decode", "--ckpt", str(probe_ckpt), "--manifest", str(corpus), "--lm", str(tmp_path / "lm.arpa"),
                 "--beam", "4", "--out", str(tmp_path / "h.jsonl")]) == EXIT_OK
    assert "score_lm" in (tmp_path / "h.jsonl").read_text()


@pytest.mark.parametrize("cmd", ["pretrain", "finetune"])
def test_short_training_runs(corpus, tmp_path, cmd):
    out = tmp_path / f"{cmd}.ckpt"
    extra = ["--codebook-size", "16"] if cmd == "pretrain" else ["--probe-hidden", "16"]
    assert main([cmd, "--manifest", str(corpus), "--steps", "2", "--batch-size", "2", "--out", str(out)]
                + extra) == EXIT_OK
    assert out.exists()
    with open(f"{out}.loss.csv") as fh:
        assert list(csv.DictReader(fh))[0]["step"] == "1"


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    from streamrq import cli
    from streamrq.tensor import NumericError

    def boom(args):
        raise NumericError("non-finite values in ctc loss")

    monkeypatch.setitem(cli.COMMANDS, "synth-corpus", boom)
    assert main(["synth-corpus", "--out", str(tmp_path)]) == cli.EXIT_NUMERIC
