"""Corpus-to-embedding export tool for the fedcluster binary dataset format."""

from .exporter import (
    DEFAULT_ENCODER,
    DEFAULT_MAX_LENGTH,
    EncoderUnavailableError,
    ExportReport,
    HashingEncoder,
    TextRecord,
    export_corpus,
    load_encoder,
    read_corpus,
    write_dataset,
)

__version__ = "0.1.0"
