"""Byte-level BPE: training, encoding, decoding and the vocab file format."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

START, CLS, PAD, UNK = 0, 1, 2, 3
SPECIALS = ("<start>", "<cls>", "<pad>", "<unk>")
NUM_SPECIALS = len(SPECIALS)
VOCAB_FILE_VERSION = 1


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token table: specials at ids 0-3, base bytes next, then one id per merge."""

    base: tuple[int, ...]
    merges: tuple[tuple[bytes, bytes], ...]
    tokens: tuple[bytes, ...] = field(init=False, repr=False)
    _ids: dict = field(init=False, repr=False, compare=False)
    _ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = [b""] * NUM_SPECIALS + [bytes([b]) for b in self.base]
        known = set(tokens[NUM_SPECIALS:])
        ranks = {}
        for r, (left, right) in enumerate(self.merges):
            if left not in known or right not in known:
                raise TokenizerError(f"merge {r} references unknown token {left!r}+{right!r}")
            tokens.append(left + right)
            known.add(left + right)
            ranks[(left, right)] = r
        ids = {}
        for i, tok in enumerate(tokens[NUM_SPECIALS:], start=NUM_SPECIALS):
            ids.setdefault(tok, i)
        object.__setattr__(self, "tokens", tuple(tokens))
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_ranks", ranks)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: bytes) -> int:
        return self._ids[token]


def _as_bytes(text) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def _merge_pair(seq: list, pair: tuple[bytes, bytes]) -> list:
    out, i, n = [], 0, len(seq)
    left, right = pair
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def train_bpe(corpus, target_size: int = 512) -> Vocab:
    """Greedy BPE over the whole corpus as one byte sequence.

    The most frequent adjacent pair is merged each round; equal counts go to
    the lexicographically smaller ``(left, right)`` pair. Training stops at
    ``target_size`` tokens (specials included) or when no pair is left.
    """
    data = _as_bytes(corpus)
    if not data:
        raise TokenizerError("empty corpus")
    base = tuple(sorted(set(data)))
    if target_size < NUM_SPECIALS + len(base):
        raise TokenizerError(
            f"target_size {target_size} below {NUM_SPECIALS} specials + {len(base)} base bytes")
    seq = [bytes([b]) for b in data]
    merges = []
    while NUM_SPECIALS + len(base) + len(merges) < target_size:
        counts = Counter(zip(seq, seq[1:]))
        if not counts:
            break
        pair = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(pair)
        seq = _merge_pair(seq, pair)
    return Vocab(base, tuple(merges))


def _apply_merges(chunk: bytes, vocab: Vocab) -> list[bytes]:
    # Lowest-rank-first is equivalent to replaying merges in training order:
    # a token produced by merge r only takes part in merges ranked after r.
    seq = [bytes([b]) for b in chunk]
    ranks = vocab._ranks
    while len(seq) > 1:
        best = min(zip(seq, seq[1:]), key=lambda p: ranks.get(p, len(ranks)))
        if best not in ranks:
            break
        seq = _merge_pair(seq, best)
    return seq


def encode(text, vocab: Vocab, add_specials: bool = False) -> list[int]:
    """Token ids for ``text``; bytes outside the base alphabet become UNK."""
    data = _as_bytes(text)
    allowed = set(vocab.base)
    ids = [START] if add_specials else []
    run = bytearray()
    for b in data:
        if b in allowed:
            run.append(b)
            continue
        if run:
            ids.extend(vocab.id_of(t) for t in _apply_merges(bytes(run), vocab))
            run = bytearray()
        ids.append(UNK)
    if run:
        ids.extend(vocab.id_of(t) for t in _apply_merges(bytes(run), vocab))
    if add_specials:
        ids.append(CLS)
    return ids


def decode(ids, vocab: Vocab) -> bytes:
    n = len(vocab)
    parts = []
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise TokenizerError(f"token id {i} out of range for vocab of size {n}")
        parts.append(vocab.tokens[i])
    return b"".join(parts)


def save_vocab(vocab: Vocab, path) -> None:
    """Write the vocab as UTF-8 text.

    Line 1 is the format version and line 2 is the vocab size. Each base byte
    follows on its own line as one hex string, then each merge as two hex
    strings separated by a tab.
    """
    lines = [str(VOCAB_FILE_VERSION), str(len(vocab))]
    lines += [bytes([b]).hex() for b in vocab.base]
    lines += [f"{left.hex()}\t{right.hex()}" for left, right in vocab.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise TokenizerError(f"{path}: truncated vocab file")
    if int(lines[0]) != VOCAB_FILE_VERSION:
        raise TokenizerError(f"{path}: unsupported vocab version {lines[0]}")
    size = int(lines[1])
    base, merges = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if "\t" in line:
            left, right = line.split("\t")
            merges.append((bytes.fromhex(left), bytes.fromhex(right)))
        elif merges:
            raise TokenizerError(f"{path}:{lineno}: base token after merges")
        else:
            (b,) = bytes.fromhex(line)
            base.append(b)
    vocab = Vocab(tuple(base), tuple(merges))
    if len(vocab) != size:
        raise TokenizerError(f"{path}: header says {size} tokens, file defines {len(vocab)}")
    return vocab
