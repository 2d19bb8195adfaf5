"""Tokenization, vocabulary, dataset loading, batching and the synthetic corpus."""
from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, EmptyDataset, MalformedRecord, UnknownLabel
from .taxonomy import ROOT, LabelHierarchy, ancestor_closure

logger = logging.getLogger(__name__)

PAD, CLS, SEP, UNK, ZERO = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]", "[ZERO]")
SPECIAL_IDS = (PAD, CLS, SEP)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token/id bijection with the reserved ids fixed at 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(RESERVED)] != list(RESERVED):
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    @property
    def corpus_tokens(self) -> list[str]:
        return self.tokens[len(RESERVED):]


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Most-frequent-first vocabulary; ties are broken lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text) if tok not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary(list(RESERVED) + kept)


def encode_text(vocab: Vocabulary, text: str, max_len: int) -> np.ndarray:
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    body = [vocab.id(t) for t in tokenize(text)][: max_len - 2]
    ids = [CLS, *body, SEP]
    ids += [PAD] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Sample:
    token_ids: np.ndarray
    target: np.ndarray
    text: str = ""

    @property
    def label_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.target)]


@dataclass(frozen=True, eq=False)
class Batch:
    token_ids: np.ndarray  # (N, n) int64
    targets: np.ndarray  # (N, |C|) float32
    indices: np.ndarray  # positions in the source dataset

    def __len__(self) -> int:
        return len(self.token_ids)


def parse_record(line: str, line_number: int) -> tuple[str, list[str]]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(line_number, f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise MalformedRecord(line_number, "record is not an object")
    text, labels = rec.get("text"), rec.get("labels")
    if not isinstance(text, str):
        raise MalformedRecord(line_number, "missing string field 'text'")
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise MalformedRecord(line_number, "missing string-array field 'labels'")
    return text, labels


def make_sample(h: LabelHierarchy, vocab: Vocabulary, text: str, labels: Sequence[str], max_len: int) -> Sample:
    idx = []
    for name in labels:
        if name not in h:
            raise UnknownLabel(name)
        idx.append(h.index(name))
    target = np.zeros(h.size, dtype=np.float32)
    target[sorted(ancestor_closure(h, idx))] = 1.0
    return Sample(encode_text(vocab, text, max_len), target, text)


def read_records(path: str | Path) -> list[tuple[str, list[str]]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record(line, n))
    return records


def load_dataset(path: str | Path, h: LabelHierarchy, vocab: Vocabulary, max_len: int) -> list[Sample]:
    """Load line-delimited ``{"text", "labels"}`` records into samples.

    Targets are closed under ancestors. Records without labels are kept as
    all-zero targets and reported once as a warning.
    """
    samples = []
    empty = 0
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            text, labels = parse_record(line, n)
            empty += not labels
            samples.append(make_sample(h, vocab, text, labels, max_len))
    if empty:
        logger.warning("%s: %d record(s) with an empty label set", path, empty)
    return samples


def make_batches(data: Sequence[Sample], batch_size: int, seed: int = 0, shuffle: bool = True) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not data:
        raise EmptyDataset("no samples to batch")
    order = np.arange(len(data))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(data))
    batches = []
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        batches.append(Batch(
            token_ids=np.stack([data[i].token_ids for i in idx]),
            targets=np.stack([data[i].target for i in idx]),
            indices=idx,
        ))
    return batches


def dataset_stats(h: LabelHierarchy, splits: dict[str, Sequence[Sample]]) -> dict:
    """Summary in the shape of a dataset-statistics table row."""
    all_samples = [s for part in splits.values() for s in part]
    avg = float(np.mean([s.target.sum() for s in all_samples])) if all_samples else 0.0
    stats = {"num_labels": h.size, "depth": h.depth, "avg_labels_per_sample": round(avg, 4)}
    stats.update({name: len(part) for name, part in splits.items()})
    return stats


def gen_synthetic(parents: int, children_per_parent: int, n_samples: int, seed: int,
                  noise_tokens: int = 6, noise_pool: int = 50) -> tuple[str, list[dict]]:
    """Generate a two-level taxonomy and a labelled corpus over it.

    Each record carries one parent-signal token, one leaf-signal token and
    ``noise_tokens`` draws from a shared noise vocabulary, shuffled together.
    Returns the taxonomy text and the list of ``{"text", "labels"}`` records.
    """
    if min(parents, children_per_parent, n_samples) < 1 or noise_tokens < 0:
        raise ValueError("parents, children_per_parent and n_samples must be >= 1")
    rng = random.Random(seed)
    parent_names = [f"P{i}" for i in range(parents)]
    leaves = [(p, f"{p}_C{j}") for p in parent_names for j in range(children_per_parent)]
    lines = ["\t".join([ROOT, *parent_names])]
    for p in parent_names:
        lines.append("\t".join([p, *(leaf for q, leaf in leaves if q == p)]))
    taxonomy_text = "\n".join(lines) + "\n"

    noise = [f"w{i}" for i in range(noise_pool)]
    records = []
    for _ in range(n_samples):
        p, leaf = leaves[rng.randrange(len(leaves))]
        toks = [f"sig_{p.lower()}", f"sig_{leaf.lower()}"]
        toks += [noise[rng.randrange(noise_pool)] for _ in range(noise_tokens)]
        rng.shuffle(toks)
        records.append({"text": " ".join(toks), "labels": [p, leaf]})
    return taxonomy_text, records


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
