"""Encode a labeled short-text corpus and write the binary embedding dataset.

Input corpora are CSV (text,label columns, header optional) or JSON lines
({"text": ..., "label": ...}). The output file follows the consumer's
little-endian layout: magic "FSTC", u32 version=1, u64 n, u32 d,
u8 has_labels, 3 pad bytes, n*d float32 row-major embeddings, n int32 labels.
Export is order-preserving: output row i is input row i.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FSTC"
VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")

DEFAULT_ENCODER = "distilbert-base-nli-stsb-mean-tokens"
DEFAULT_MAX_LENGTH = 32
DEFAULT_BATCH_SIZE = 64
DEBUG_ENCODER_NAME = "debug-hash"
DEBUG_DIM = 768

# reference corpus sizes and label counts; mismatches are reported, not fatal
KNOWN_CORPORA = {
    "agnews": (8000, 4),
    "stackoverflow": (20000, 20),
    "biomedical": (20000, 20),
}


@dataclass
class TextRecord:
    text: str
    label: int


@dataclass
class ExportReport:
    n: int
    d: int
    skipped_rows: int
    out_path: Path


class EncoderUnavailableError(RuntimeError):
    pass


class HashingEncoder:
    """Deterministic offline stand-in encoder: hashed bag of words, L2 normalized.

    Useful for dry-running the export pipeline and for tests; not a semantic
    embedding. Dimension matches the default transformer encoder.
    """

    def __init__(self, max_length: int = DEFAULT_MAX_LENGTH, dim: int = DEBUG_DIM):
        self.max_length = max_length
        self.dim = dim

    def encode(self, texts, batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = text.lower().split()[: self.max_length]
            for token in tokens:
                digest = hashlib.sha1(token.encode("utf-8")).digest()
                idx = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                out[i, idx] += sign
            norm = float(np.linalg.norm(out[i]))
            if norm > 0.0:
                out[i] /= norm
        return out


class SentenceEncoder:
    """Wrapper around a sentence-transformers model."""

    def __init__(self, name: str, max_length: int, cache_dir: str | None = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderUnavailableError(
                "sentence-transformers is not installed; run "
                "'pip install sentence-transformers' (or use --encoder debug-hash "
                "for a non-semantic dry run)"
            ) from exc
        try:
            self.model = SentenceTransformer(name, cache_folder=cache_dir)
        except Exception as exc:
            raise EncoderUnavailableError(
                f"could not load encoder {name!r}: {exc}; check the model name, "
                "network access, and the cache directory (EMBED_EXPORT_CACHE)"
            ) from exc
        self.model.max_seq_length = max_length

    def encode(self, texts, batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
        return np.asarray(
            self.model.encode(
                list(texts),
                batch_size=batch_size,
                show_progress_bar=False,
                convert_to_numpy=True,
            ),
            dtype=np.float32,
        )


def load_encoder(name: str, max_length: int, cache_dir: str | None = None):
    if name == DEBUG_ENCODER_NAME:
        return HashingEncoder(max_length=max_length)
    return SentenceEncoder(name, max_length, cache_dir=cache_dir)


def _record_from_fields(text, label) -> TextRecord | None:
    if text is None or label is None:
        return None
    text = str(text).strip()
    if not text:
        return None
    try:
        label_int = int(label)
    except (TypeError, ValueError):
        return None
    if label_int < 0:
        return None
    return TextRecord(text=text, label=label_int)


def read_corpus(path, fmt: str) -> tuple[list[TextRecord], int]:
    """Parse records in input order; malformed rows are skipped and counted."""
    path = Path(path)
    records: list[TextRecord] = []
    skipped = 0
    if fmt == "csv":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            rows = list(reader)
        start = 0
        if rows and [c.strip().lower() for c in rows[0][:2]] == ["text", "label"]:
            start = 1
        for row in rows[start:]:
            record = _record_from_fields(*(row[:2] if len(row) >= 2 else (None, None)))
            if record is None:
                skipped += 1
            else:
                records.append(record)
    elif fmt == "jsonl":
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    record = _record_from_fields(obj.get("text"), obj.get("label"))
                except (json.JSONDecodeError, AttributeError):
                    record = None
                if record is None:
                    skipped += 1
                else:
                    records.append(record)
    else:
        raise ValueError(f"unknown corpus format {fmt!r}")
    return records, skipped


def write_dataset(x: np.ndarray, labels, path) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    n, d = x.shape
    with open(Path(path), "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, d, 1))
        f.write(x.tobytes())
        f.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def check_known_corpus(name_hint: str, n: int, n_labels: int) -> str | None:
    """Compare against the reference corpus statistics; returns a warning."""
    hint = name_hint.lower()
    for key, (ref_n, ref_k) in KNOWN_CORPORA.items():
        if key in hint:
            if n != ref_n or n_labels != ref_k:
                return (
                    f"{key}: exported n={n} with {n_labels} label values, "
                    f"reference is n={ref_n} with {ref_k} classes; the corpus "
                    "snapshot may differ from the reference one"
                )
            return None
    return None


def export_corpus(
    input_path,
    fmt: str,
    encoder,
    out_path,
    batch_size: int = DEFAULT_BATCH_SIZE,
    log=print,
) -> ExportReport:
    records, skipped = read_corpus(input_path, fmt)
    if not records:
        raise ValueError(f"no usable records in {input_path}")
    if skipped:
        log(f"skipped {skipped} malformed rows", file=sys.stderr)
    texts = [r.text for r in records]
    labels = np.array([r.label for r in records], dtype=np.int64)
    embeddings = encoder.encode(texts, batch_size=batch_size)
    if embeddings.shape[0] != len(records):
        raise RuntimeError(
            f"encoder returned {embeddings.shape[0]} rows for {len(records)} texts"
        )
    out_path = Path(out_path)
    write_dataset(embeddings, labels, out_path)
    warning = check_known_corpus(
        f"{Path(input_path).stem} {out_path.stem}", len(records), len(np.unique(labels))
    )
    if warning:
        log(f"warning: {warning}", file=sys.stderr)
    return ExportReport(
        n=len(records), d=embeddings.shape[1], skipped_rows=skipped, out_path=out_path
    )
