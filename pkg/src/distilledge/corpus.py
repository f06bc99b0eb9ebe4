"""Dataset ingestion, tokenization, vocabulary construction, and user shards.

File formats:
  - CSV: ``label,aspect,text`` (RFC-4180 quoting). Labels are 1-based in the
    file and converted to 0-based. The aspect column may be empty, an aspect
    name resolved through a lexicon, or a 0-based integer index.
  - JSONL datasets: one ``{"text": ..., "label": ..., "aspect": ...}`` object
    per line with 0-based labels.
  - JSONL user shards: one ``{"user_id": ..., "train": [...], "val": [...],
    "test": [...]}`` object per line.
  - Aspect lexicon: a JSON object mapping aspect name to a contiguous 0-based
    index.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


@dataclass(frozen=True)
class RawExample:
    text: str
    label: int
    aspect: int | None = None


@dataclass(frozen=True)
class EncodedExample:
    token_ids: tuple[int, ...]  # padded with PAD_ID to a fixed width
    length: int                 # token count before padding (post truncation)
    label: int
    aspect: int | None = None


@dataclass
class UserShard:
    user_id: str
    train: list[RawExample]
    val: list[RawExample]
    test: list[RawExample]

    @property
    def selection_eligible(self) -> bool:
        return len(self.val) > 0


def _strip_edge_punctuation(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation from token edges.

    Tokens that are pure punctuation disappear. Deterministic by construction.
    """
    out = []
    for raw in text.lower().split():
        tok = _strip_edge_punctuation(raw)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Immutable frequency-ranked token table with reserved PAD=0 and UNK=1."""

    __slots__ = ("tokens", "index")

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise FormatError("vocabulary must start with PAD and UNK tokens")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id in (PAD_ID, UNK_ID)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tokens": self.tokens}, f, ensure_ascii=False)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        return cls(obj["tokens"])


def build_vocab(
    corpus: Iterable[RawExample | str],
    max_size: int = 20_000,
    min_freq: int = 1,
) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``max_size`` includes the PAD/UNK slots. Tokens seen fewer than
    ``min_freq`` times are excluded.
    """
    if max_size < 2:
        raise ValueError("max_size must be >= 2 to hold PAD and UNK")
    counts: Counter[str] = Counter()
    n_docs = 0
    for item in corpus:
        text = item.text if isinstance(item, RawExample) else item
        counts.update(tokenize(text))
        n_docs += 1
    if n_docs == 0 or not counts:
        raise ValueError("empty corpus: no tokens to build a vocabulary from")
    kept = [tok for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    kept = kept[: max_size - 2]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept)


def encode(example: RawExample, vocab: Vocabulary, max_len: int) -> EncodedExample:
    """Tokenize, map OOV to UNK, truncate at max_len, pad with PAD."""
    toks = tokenize(example.text)[:max_len]
    ids = [vocab.id_of(t) for t in toks]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return EncodedExample(tuple(ids), length, example.label, example.aspect)


def decode(token_ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Inverse of encode up to normalization: PAD dropped, UNK kept."""
    return [vocab.token_of(i) for i in token_ids if i != PAD_ID]


def load_aspect_lexicon(path: str | Path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    if not isinstance(obj, dict) or not obj:
        raise FormatError(f"{path}: aspect lexicon must be a non-empty JSON object")
    values = sorted(obj.values())
    if values != list(range(len(obj))):
        raise FormatError(f"{path}: aspect indices must be contiguous from 0")
    return {str(k): int(v) for k, v in obj.items()}


def _resolve_aspect(
    raw, num_aspects: int | None, aspect_lexicon: dict[str, int] | None, where: str
) -> int | None:
    if raw is None or raw == "":
        return None
    if isinstance(raw, str) and aspect_lexicon is not None and raw in aspect_lexicon:
        aspect = aspect_lexicon[raw]
    else:
        try:
            aspect = int(raw)
        except (TypeError, ValueError):
            raise FormatError(f"{where}: unknown aspect {raw!r}") from None
    bound = num_aspects if num_aspects is not None else (
        len(aspect_lexicon) if aspect_lexicon else None
    )
    if aspect < 0 or (bound is not None and aspect >= bound):
        raise FormatError(f"{where}: aspect index {aspect} out of range")
    return aspect


def _check_label(label: int, num_classes: int, where: str) -> int:
    if not 0 <= label < num_classes:
        raise FormatError(
            f"{where}: label {label} out of range for {num_classes} classes"
        )
    return label


def load_dataset(
    path: str | Path,
    fmt: str = "csv",
    num_classes: int = 2,
    num_aspects: int | None = None,
    aspect_lexicon: dict[str, int] | None = None,
) -> list[RawExample]:
    """Load a labeled text dataset.

    Malformed rows (wrong field count, non-integer label, empty text) are
    skipped, counted, and reported through the module logger. Out-of-range
    labels or aspects raise FormatError naming the offending row.
    """
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    examples: list[RawExample] = []
    bad_rows: list[int] = []

    if fmt == "csv":
        with open(path, "r", encoding="utf-8", newline="") as f:
            for row_num, fields in enumerate(csv.reader(f), start=1):
                where = f"{path}:{row_num}"
                if len(fields) not in (2, 3):
                    bad_rows.append(row_num)
                    continue
                try:
                    label = int(fields[0]) - 1  # 1-based on disk
                except ValueError:
                    bad_rows.append(row_num)
                    continue
                _check_label(label, num_classes, where)
                if len(fields) == 3:
                    aspect_raw, text = fields[1], fields[2]
                else:
                    aspect_raw, text = "", fields[1]
                aspect = _resolve_aspect(aspect_raw, num_aspects, aspect_lexicon, where)
                text = " ".join(text.split())
                if not text:
                    bad_rows.append(row_num)
                    continue
                examples.append(RawExample(text, label, aspect))
    else:
        with open(path, "r", encoding="utf-8") as f:
            for row_num, line in enumerate(f, start=1):
                where = f"{path}:{row_num}"
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    label = int(obj["label"])  # 0-based on disk
                    text = " ".join(str(obj["text"]).split())
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    bad_rows.append(row_num)
                    continue
                _check_label(label, num_classes, where)
                aspect = _resolve_aspect(obj.get("aspect"), num_aspects, aspect_lexicon, where)
                if not text:
                    bad_rows.append(row_num)
                    continue
                examples.append(RawExample(text, label, aspect))

    if bad_rows:
        shown = ", ".join(str(r) for r in bad_rows[:10])
        logger.warning(
            "%s: skipped %d malformed row(s) (lines %s%s)",
            path, len(bad_rows), shown, ", ..." if len(bad_rows) > 10 else "",
        )
    return examples


def _example_from_obj(obj, num_classes: int, where: str) -> RawExample:
    if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
        raise FormatError(f"{where}: expected an object with text and label")
    text = " ".join(str(obj["text"]).split())
    if not text:
        raise FormatError(f"{where}: empty text")
    label = _check_label(int(obj["label"]), num_classes, where)
    aspect = obj.get("aspect")
    return RawExample(text, label, None if aspect is None else int(aspect))


def load_user_shards(path: str | Path, num_classes: int = 2) -> list[UserShard]:
    """Load per-user train/val/test shards from JSONL, in file order.

    Duplicate user ids and overlapping splits (same text+label in two splits)
    are rejected.
    """
    shards: list[UserShard] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for row_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{row_num}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc})") from None
            user_id = str(obj.get("user_id", ""))
            if not user_id:
                raise FormatError(f"{where}: missing user_id")
            if user_id in seen:
                raise FormatError(f"{where}: duplicate user_id {user_id!r}")
            seen.add(user_id)
            splits = {}
            for split in ("train", "val", "test"):
                splits[split] = [
                    _example_from_obj(item, num_classes, f"{where} ({split}[{i}])")
                    for i, item in enumerate(obj.get(split, []))
                ]
            keys = {s: {(ex.text, ex.label) for ex in splits[s]} for s in splits}
            for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
                if keys[a] & keys[b]:
                    raise FormatError(
                        f"{where}: user {user_id!r} has overlapping {a}/{b} splits"
                    )
            shard = UserShard(user_id, splits["train"], splits["val"], splits["test"])
            logger.info(
                "shard %s: train=%d val=%d test=%d eligible=%s",
                user_id, len(shard.train), len(shard.val), len(shard.test),
                shard.selection_eligible,
            )
            shards.append(shard)
    return shards


def fingerprint(examples: Iterable[RawExample | EncodedExample]) -> str:
    """Content hash of a dataset, stable across runs and platforms."""
    h = hashlib.sha256()
    for ex in examples:
        if isinstance(ex, EncodedExample):
            rec = [list(ex.token_ids), ex.length, ex.label, ex.aspect]
        else:
            rec = [ex.text, ex.label, ex.aspect]
        h.update(json.dumps(rec, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
