import json
import sys

import numpy as np
import pytest

from embed_export.cli import main
from embed_export.exporter import (
    EncoderUnavailableError,
    HashingEncoder,
    export_corpus,
    load_encoder,
    read_corpus,
    write_dataset,
)

# interop checks go through the consumer's public loader
from fedcluster.datasets import load_dataset


class StubEncoder:
    """Deterministic fake with tiny dimension for fast structural tests."""

    def __init__(self, dim=6):
        self.dim = dim
        self.calls = []

    def encode(self, texts, batch_size=64):
        self.calls.append(list(texts))
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i, 0] = len(text)
            out[i, 1] = i
        return out


def write_csv(path, rows, header=True):
    lines = ["text,label"] if header else []
    lines += rows
    path.write_text("\n".join(lines) + "\n")


class TestReadCorpus:
    def test_csv_with_header(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(path, ["hello world,0", "short text,1"])
        records, skipped = read_corpus(path, "csv")
        assert [r.text for r in records] == ["hello world", "short text"]
        assert [r.label for r in records] == [0, 1]
        assert skipped == 0

    def test_csv_without_header(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(path, ["just text,2"], header=False)
        records, skipped = read_corpus(path, "csv")
        assert records[0].label == 2
        assert skipped == 0

    def test_malformed_rows_skipped_and_counted(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(path, ["good,0", ",1", "no label", "bad,notanint", "ok,3"])
        records, skipped = read_corpus(path, "csv")
        assert [r.text for r in records] == ["good", "ok"]
        assert skipped == 3

    def test_jsonl(self, tmp_path):
        path = tmp_path / "c.jsonl"
        rows = [
            {"text": "alpha", "label": 0},
            {"text": "", "label": 1},
            {"label": 2},
            "not json at all",
            {"text": "beta", "label": 1},
        ]
        path.write_text(
            "\n".join(json.dumps(r) if isinstance(r, dict) else r for r in rows)
        )
        records, skipped = read_corpus(path, "jsonl")
        assert [r.text for r in records] == ["alpha", "beta"]
        assert skipped == 3

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("x")
        with pytest.raises(ValueError):
            read_corpus(path, "tsv")


class TestWriteDataset:
    def test_output_loads_through_consumer(self, tmp_path):
        x = np.arange(12, dtype=np.float32).reshape(4, 3)
        labels = np.array([0, 1, 0, 2])
        out = tmp_path / "d.fstc"
        write_dataset(x, labels, out)
        ds = load_dataset(out)
        assert ds.n == 4 and ds.d == 3
        assert np.array_equal(ds.x, x.astype(np.float64))
        assert np.array_equal(ds.labels, labels)


class TestExportCorpus:
    def test_order_preserving_round_trip(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(path, [f"sample number {i},{i % 3}" for i in range(10)])
        out = tmp_path / "out.fstc"
        encoder = StubEncoder()
        report = export_corpus(path, "csv", encoder, out)
        assert report.n == 10 and report.skipped_rows == 0
        ds = load_dataset(out)
        # StubEncoder stores the input position in column 1
        assert np.array_equal(ds.x[:, 1], np.arange(10, dtype=float))
        assert np.array_equal(ds.labels, np.arange(10) % 3)

    def test_empty_corpus_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        write_csv(path, [])
        with pytest.raises(ValueError):
            export_corpus(path, "csv", StubEncoder(), tmp_path / "o.fstc")

    def test_known_corpus_mismatch_reported(self, tmp_path, capsys):
        path = tmp_path / "agnews.csv"
        write_csv(path, ["headline one,0", "headline two,1"])
        export_corpus(path, "csv", StubEncoder(), tmp_path / "agnews.fstc")
        err = capsys.readouterr().err
        assert "reference is n=8000" in err


class TestHashingEncoder:
    def test_shapes_and_determinism(self):
        enc = HashingEncoder(max_length=32)
        texts = ["one small sentence", "another line of text", "third"]
        a = enc.encode(texts)
        b = enc.encode(texts)
        assert a.shape == (3, 768)
        assert a.dtype == np.float32
        assert np.array_equal(a, b)
        norms = np.linalg.norm(a, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_max_length_truncates(self):
        enc = HashingEncoder(max_length=2)
        short = enc.encode(["alpha beta"])
        longer = enc.encode(["alpha beta gamma delta"])
        assert np.array_equal(short, longer)

    def test_loadable_by_name(self):
        enc = load_encoder("debug-hash", max_length=16)
        assert isinstance(enc, HashingEncoder)
        assert enc.max_length == 16


class TestEncoderUnavailable:
    def test_missing_dependency_explains_itself(self, monkeypatch):
        monkeypatch.setitem(sys.modules, "sentence_transformers", None)
        with pytest.raises(EncoderUnavailableError) as err:
            load_encoder("distilbert-base-nli-stsb-mean-tokens", 32)
        assert "pip install sentence-transformers" in str(err.value)


class TestCli:
    def test_full_export_with_debug_encoder(self, tmp_path, capsys):
        corpus = tmp_path / "tiny.csv"
        write_csv(
            corpus,
            ["a tiny handwritten sentence,0", "another tiny sentence,1", "third one,2"],
        )
        out = tmp_path / "tiny.fstc"
        code = main(
            [
                "export", "--input", str(corpus), "--format", "csv",
                "--out", str(out), "--encoder", "debug-hash", "--max-length", "32",
            ]
        )
        assert code == 0
        assert "3 rows, dim 768" in capsys.readouterr().out
        ds = load_dataset(out)
        assert ds.x.shape == (3, 768)
        assert ds.labels.tolist() == [0, 1, 2]

    def test_missing_input_exits_2(self, tmp_path):
        code = main(
            [
                "export", "--input", str(tmp_path / "absent.csv"), "--format", "csv",
                "--out", str(tmp_path / "o.fstc"),
            ]
        )
        assert code == 2

    def test_unavailable_encoder_exits_3(self, tmp_path, monkeypatch, capsys):
        corpus = tmp_path / "c.csv"
        write_csv(corpus, ["text,0"])
        monkeypatch.setitem(sys.modules, "sentence_transformers", None)
        code = main(
            [
                "export", "--input", str(corpus), "--format", "csv",
                "--out", str(tmp_path / "o.fstc"),
            ]
        )
        assert code == 3
        assert "sentence-transformers" in capsys.readouterr().err
