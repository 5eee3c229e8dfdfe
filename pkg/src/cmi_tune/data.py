"""Labelled datasets, synthetic tasks, batching and GLUE-style metrics."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import PAD, Vocab, encode, train_bpe

SYNTH_KINDS = ("majority_token", "contains_pattern", "parity_of_token")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class TaskConfigError(DataError):
    """A synthetic task was requested with settings it cannot satisfy."""


@dataclass
class LabeledDataset:
    sequences: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"
    texts: list[bytes] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise DataError("sequences and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SchemaError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_index(self) -> dict[int, np.ndarray]:
        return {y: np.flatnonzero(self.labels == y) for y in range(self.num_classes)}

    def max_len(self) -> int:
        return max((len(s) for s in self.sequences), default=0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.num_classes}|{self.split}|".encode())
        for seq, y in zip(self.sequences, self.labels):
            h.update(np.asarray(seq, dtype="<i8").tobytes())
            h.update(b"|%d;" % y)
        return h.hexdigest()[:16]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        texts = [self.texts[i] for i in idx] if self.texts is not None else None
        return LabeledDataset([self.sequences[i] for i in idx], self.labels[idx],
                              self.num_classes, self.split, self.name, texts)


@dataclass
class Batch:
    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def collate(dataset: LabeledDataset, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    seqs = [dataset.sequences[i] for i in idx]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max(initial=1))), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
    return Batch(ids, lengths, dataset.labels[idx], idx)


def iter_batches(dataset: LabeledDataset, batch_size: int, seed: int | None = None,
                 epoch: int = 0):
    """Yield batches; order is a pure function of (dataset, seed, epoch).

    ``seed=None`` keeps dataset order.
    """
    n = len(dataset)
    order = np.arange(n)
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    for s in range(0, n, batch_size):
        yield collate(dataset, order[s:s + batch_size])


# -- ingestion ------------------------------------------------------------------

def encode_text(text, vocab: Vocab, max_len: int) -> np.ndarray:
    """Encode with START/CLS, keeping the tail (and thus CLS) when too long."""
    ids = encode(text, vocab, add_specials=True)
    if len(ids) > max_len:
        ids = ids[-max_len:]
    return np.asarray(ids, dtype=np.int64)


def read_jsonl(path) -> tuple[list[bytes], list[int]]:
    """Raw UTF-8 texts and integer labels from ``{"text": str, "label": int}`` lines."""
    texts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                text, label = row["text"], row["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from None
            if not isinstance(text, str) or isinstance(label, bool) or not isinstance(label, int):
                raise DataError(f"{path}:{lineno}: expected string text and integer label")
            texts.append(text.encode("utf-8"))
            labels.append(label)
    return texts, labels


def load_jsonl(path, vocab: Vocab, max_len: int, num_classes: int | None = None,
               split: str = "train") -> LabeledDataset:
    """Read and encode a JSONL split.

    Without ``num_classes`` the labels must be exactly ``0..C-1``; with it,
    they only need to fall in that range (useful for dev splits).
    """
    texts, labels = read_jsonl(path)
    if not labels:
        raise SchemaError(f"{path}: no samples, so no classes")
    present = sorted(set(labels))
    if num_classes is None:
        if present != list(range(len(present))) or len(present) < 2:
            raise SchemaError(f"{path}: labels {present} are not dense from 0 with at least 2 classes")
        num_classes = len(present)
    elif present[0] < 0 or present[-1] >= num_classes:
        raise SchemaError(f"{path}: labels {present} outside [0, {num_classes})")
    seqs = [encode_text(t, vocab, max_len) for t in texts]
    return LabeledDataset(seqs, np.asarray(labels), num_classes, split, Path(path).stem, texts)


def tsv_to_jsonl(tsv_path, jsonl_path, text_columns, label_column, separator: str = " | ",
                 label_map: dict | None = None) -> int:
    """Convert a headed TSV (e.g. a GLUE split) into the JSONL schema.

    Sentence pairs are joined with ``separator``. Returns the row count.
    """
    n = 0
    with open(tsv_path, encoding="utf-8", newline="") as src, \
            open(jsonl_path, "w", encoding="utf-8") as dst:
        for row in csv.DictReader(src, delimiter="\t", quoting=csv.QUOTE_NONE):
            text = separator.join(row[c] for c in text_columns)
            raw = row[label_column]
            label = label_map[raw] if label_map else int(raw)
            dst.write(json.dumps({"text": text, "label": label}) + "\n")
            n += 1
    return n


# -- synthetic tasks ----------------------------------------------------------

SYNTH_ALPHABET = b"abcdefgh"
PATTERN = b"abc"


def synth_vocab() -> Vocab:
    """Character-level vocab over the synthetic alphabet (no merges)."""
    return train_bpe(SYNTH_ALPHABET, target_size=4 + len(SYNTH_ALPHABET))


def majority_label(text: bytes, num_classes: int = 2) -> int:
    """Index of the most frequent designated token (a, b, c, ...); ties go to the earlier one."""
    if num_classes == 2:
        return 0 if text.count(b"a") > text.count(b"b") else 1
    counts = [text.count(SYNTH_ALPHABET[i:i + 1]) for i in range(num_classes)]
    return counts.index(max(counts))


def pattern_label(text: bytes) -> int:
    return int(PATTERN in text)


def parity_label(text: bytes) -> int:
    return text.count(b"a") % 2


RULES = {"majority_token": majority_label, "contains_pattern": pattern_label,
         "parity_of_token": parity_label}


def _majority_text(label: int, length: int, rng) -> bytes:
    # Odd number of a/b tokens so there is never a tie.
    m = int(rng.choice(np.arange(3, length + 1, 2)))
    big = int(rng.integers(m // 2 + 1, m + 1))
    na, nb = (big, m - big) if label == 0 else (m - big, big)
    filler = rng.choice(list(b"cdefgh"), size=length - m)
    chars = np.array([ord("a")] * na + [ord("b")] * nb + list(filler), dtype=np.uint8)
    return bytes(rng.permutation(chars))


def _majority_text_multi(label: int, length: int, rng, num_classes: int) -> bytes:
    # Rejection sampling; only strings with a unique maximum are kept.
    alphabet = list(SYNTH_ALPHABET)
    while True:
        text = bytes(rng.choice(alphabet, size=length).astype(np.uint8))
        counts = [text.count(SYNTH_ALPHABET[i:i + 1]) for i in range(num_classes)]
        top = max(counts)
        if counts.count(top) == 1 and counts.index(top) == label:
            return text


def _pattern_text(label: int, length: int, rng) -> bytes:
    while True:
        text = bytes(rng.choice(list(SYNTH_ALPHABET), size=length).astype(np.uint8))
        if label == 1:
            at = int(rng.integers(0, length - len(PATTERN) + 1))
            text = text[:at] + PATTERN + text[at + len(PATTERN):]
        if pattern_label(text) == label:
            return text


def _parity_text(label: int, length: int, rng) -> bytes:
    text = bytearray(rng.choice(list(SYNTH_ALPHABET), size=length).astype(np.uint8))
    if text.count(b"a") % 2 != label:
        pos = int(rng.integers(0, length))
        text[pos] = ord("b") if text[pos] == ord("a") else ord("a")
    return bytes(text)


_MAKERS = {"majority_token": _majority_text, "contains_pattern": _pattern_text,
           "parity_of_token": _parity_text}


def synth_task(kind: str, n_samples: int, seed: int, vocab: Vocab | None = None,
               length: int = 16, split: str = "train", num_classes: int = 2) -> LabeledDataset:
    """Task whose label is a deterministic rule of the text.

    Labels cycle through the classes before shuffling, so classes are
    balanced within one. Only majority_token supports more than two classes.
    """
    if kind not in _MAKERS:
        raise TaskConfigError(f"unknown synthetic task {kind!r}; choose from {SYNTH_KINDS}")
    if num_classes != 2 and not (kind == "majority_token" and 2 < num_classes <= 4):
        raise TaskConfigError(f"{kind} supports 2 classes (majority_token up to 4), got {num_classes}")
    if n_samples < 10 * num_classes:
        raise TaskConfigError("synthetic tasks need at least 10 samples per class")
    vocab = vocab or synth_vocab()
    missing = set(SYNTH_ALPHABET) - set(vocab.base)
    if missing:
        raise TaskConfigError(f"vocab lacks synthetic alphabet bytes {bytes(sorted(missing))!r}")
    if length < len(PATTERN) + 1:
        raise TaskConfigError("synthetic sequences need length >= 4")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    if num_classes == 2:
        texts = [_MAKERS[kind](int(y), length, rng) for y in labels]
    else:
        texts = [_majority_text_multi(int(y), length, rng, num_classes) for y in labels]
    seqs = [np.asarray(encode(t, vocab, add_specials=True), dtype=np.int64) for t in texts]
    return LabeledDataset(seqs, labels, num_classes, split, kind, texts)


# -- metrics -------------------------------------------------------------------

def _check_pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"predictions {preds.shape} and labels {labels.shape} differ")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float((preds == labels).mean()) if labels.size else 0.0


def _confusion(preds, labels):
    preds, labels = _check_pair(preds, labels)
    if not set(np.unique(np.concatenate([preds, labels]))) <= {0, 1}:
        raise DataError("binary metric needs labels in {0, 1}")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, tn, fp, fn


def f1_binary(preds, labels) -> float:
    """F1 of the positive class; 0 when there are no predicted or true positives."""
    tp, _, fp, fn = _confusion(preds, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def matthews_corr(preds, labels) -> float:
    """Binary MCC; returns 0 when any confusion-table marginal is empty."""
    tp, tn, fp, fn = _confusion(preds, labels)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / float(np.sqrt(denom))


METRICS = {"accuracy": accuracy, "f1": f1_binary, "mcc": matthews_corr}


def compute_metric(name: str, preds, labels) -> float:
    try:
        return METRICS[name](preds, labels)
    except KeyError:
        raise DataError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


def all_metrics(preds, labels, num_classes: int) -> dict[str, float]:
    out = {"accuracy": accuracy(preds, labels)}
    if num_classes == 2:
        out["f1"] = f1_binary(preds, labels)
        out["mcc"] = matthews_corr(preds, labels)
    return out

