"""Question-pair TSV ingestion and the binary checkpoint format.

Checkpoint layout (all integers little-endian u32)::

    magic    8 bytes  b"QPICKPT\\x00"
    version  u32      1
    count    u32      number of tensors
    per tensor:
        name_len u32, name (UTF-8), rank u32, dims u32 * rank,
        data float32 * prod(dims), row-major
    blob_len u32, blob (UTF-8 JSON: model config, vocabulary, metadata)

Parameter names are dotted paths, e.g. ``embeddings.token_table``,
``encoder.layer.3.attention.W_q`` (shape ``[d_in, d_out]``, applied as
``x @ W``), ``head.cnn.width2.filter17.weight`` and ``classifier.weight``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .encoder import set_trainable_encoders
from .errors import (CheckpointFormatError, CheckpointMissingError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError, DataError)
from .pipelines import ParaphraseModel, QuestionPair, param_shapes
from .tokenizer import Vocab

log = logging.getLogger(__name__)

MAGIC = b"QPICKPT\x00"
VERSION = 1
COLUMNS = ("question1", "question2", "is_duplicate")
SPLIT_FILES = {"train": "train.tsv", "validation": "dev.tsv", "test": "test.tsv"}


@dataclass
class Dataset:
    pairs: list[QuestionPair]
    split: str | None = None
    class_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = dict(Counter(p.label for p in self.pairs if p.label is not None))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def labels(self) -> list[int]:
        return [p.label for p in self.pairs]


def load_pairs_tsv(path: str | Path, split: str | None = None) -> Dataset:
    """Read ``question1<TAB>question2<TAB>is_duplicate`` rows.

    A header row is detected by its column names and may carry extra
    columns (the public release also has ``id``, ``qid1``, ``qid2``).
    Every malformed row is reported with its line number.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows:
        return Dataset([], split)

    header = [c.strip().lower() for c in rows[0]]
    if all(c in header for c in COLUMNS):
        cols = [header.index(c) for c in COLUMNS]
        width = len(header)
        body = enumerate(rows[1:], start=2)
    else:
        cols, width = [0, 1, 2], 3
        body = enumerate(rows, start=1)

    pairs: list[QuestionPair] = []
    errors: list[str] = []
    for lineno, row in body:
        if not row:
            continue
        if len(row) != width:
            errors.append(f"line {lineno}: expected {width} columns, found {len(row)}")
            continue
        a, b, raw = (row[c] for c in cols)
        raw = raw.strip()
        if raw not in ("0", "1"):
            errors.append(f"line {lineno}: label must be 0 or 1, found {raw!r}")
            continue
        pairs.append(QuestionPair(a, b, int(raw)))
    if errors:
        shown = "; ".join(errors[:20])
        more = f" (+{len(errors) - 20} more)" if len(errors) > 20 else ""
        raise DataError(f"{path}: {len(errors)} malformed rows: {shown}{more}")
    return Dataset(pairs, split)


def load_standard_splits(directory: str | Path, strict_split: bool = False) -> tuple[Dataset, Dataset, Dataset]:
    """``train.tsv``, ``dev.tsv`` and ``test.tsv`` from one directory.

    With ``strict_split`` the dev and test sets must each hold exactly
    10000 pairs, half of them paraphrases.
    """
    directory = Path(directory)
    out = []
    for split, fname in SPLIT_FILES.items():
        path = directory / fname
        if not path.is_file():
            raise DataError(f"missing split file {fname} in {directory}")
        out.append(load_pairs_tsv(path, split))
    train, dev, test = out
    if strict_split:
        for ds in (dev, test):
            if len(ds) != 10000 or ds.class_counts.get(1, 0) != 5000:
                raise DataError(f"{ds.split} split has {len(ds)} pairs ({ds.class_counts.get(1, 0)} positive); "
                                "the standard split has 10000 with 5000 positive")
    return train, dev, test


def save_pairs_tsv(pairs, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for p in pairs:
            fh.write(f"{p.question_a}\t{p.question_b}\t{p.label}\n")


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: ParaphraseModel, meta: dict | None, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(model.params)))
    for name, t in model.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    blob = json.dumps({
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.tokens) if model.vocab is not None else None,
        "seed": model.seed,
        "trainable_encoders": model.trainable_encoders,
        "meta": meta or {},
    }).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: file ends inside {what}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


@dataclass
class CheckpointContents:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    vocab: Vocab | None
    seed: int
    trainable_encoders: int | None
    meta: dict


def read_checkpoint(path: str | Path) -> CheckpointContents:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    r.pos = len(MAGIC)
    version = r.u32("header")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32("header")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"shape of {name}"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    blob = json.loads(r.take(r.u32("metadata length"), "metadata").decode("utf-8"))
    vocab = Vocab(blob["vocab"]) if blob.get("vocab") else None
    return CheckpointContents(tensors, ModelConfig.from_dict(blob["config"]), vocab,
                              blob.get("seed", 0), blob.get("trainable_encoders"), blob.get("meta", {}))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> ParaphraseModel:
    """Rebuild a model from ``path``; ``config`` overrides the embedded one."""
    contents = read_checkpoint(path)
    cfg = config or contents.config
    expected = param_shapes(cfg)
    for name, arr in contents.tensors.items():
        if name in expected and tuple(arr.shape) != tuple(expected[name][0]):
            raise CheckpointShapeError(f"tensor {name}: checkpoint shape {tuple(arr.shape)}, "
                                       f"config expects {tuple(expected[name][0])}")
    missing = [n for n in expected if n not in contents.tensors]
    if missing:
        raise CheckpointMissingError(f"checkpoint lacks {len(missing)} tensors: {', '.join(missing[:20])}")
    extra = [n for n in contents.tensors if n not in expected]
    if extra:
        warnings.warn(f"ignoring {len(extra)} unexpected tensors: {', '.join(extra[:20])}", stacklevel=2)
    model = ParaphraseModel(cfg, contents.vocab, seed=contents.seed)
    model.params.load_state({n: contents.tensors[n] for n in expected})
    if contents.trainable_encoders is not None and config is None:
        set_trainable_encoders(model, contents.trainable_encoders)
    return model
