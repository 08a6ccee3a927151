import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from errors import ConfigError, DatasetError
from logging_config import get_logger
from rng import keyed_rng

logger = get_logger(__name__)

# letters and digits, with apostrophes allowed between them ("don't", "l'eau")
TOKEN_RE = re.compile(r"[^\W_]+(?:['’][^\W_]+)*")


def tokenize(text):
    return TOKEN_RE.findall(text.lower())


def nearest_rank_percentile(values, q):
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    if len(values) == 0:
        raise DatasetError("percentile of an empty list")
    if not 0 <= q <= 100:
        raise ConfigError(f"percentile {q} outside [0, 100]")
    # rank in exact arithmetic
    rank = max(1, math.ceil(Fraction(str(q)) * len(values) / 100))
    return float(np.sort(np.asarray(values, dtype=float))[rank - 1])


@dataclass(frozen=True)
class McqItem:
    id: str
    question: str
    choices: tuple
    gold_index: int
    language: str
    subject: Optional[str] = None

    kind = "mcq"

    @property
    def k(self):
        return len(self.choices)

    def to_record(self):
        record = {
            "id": self.id,
            "question": self.question,
            "choices": list(self.choices),
            "gold_index": self.gold_index,
        }
        if self.subject is not None:
            record["subject"] = self.subject
        record["language"] = self.language
        return record


@dataclass(frozen=True)
class QaItem:
    id: str
    context: str
    question: str
    answer_text: str
    language: str
    answer_char_start: Optional[int] = None

    kind = "qa"

    def to_record(self):
        record = {
            "id": self.id,
            "context": self.context,
            "question": self.question,
            "answer_text": self.answer_text,
        }
        if self.answer_char_start is not None:
            record["answer_char_start"] = self.answer_char_start
        record["language"] = self.language
        return record


@dataclass(frozen=True)
class ParallelInstance:
    canonical_id: str
    views: dict

    @property
    def kind(self):
        return next(iter(self.views.values())).kind

    @property
    def languages(self):
        return list(self.views)

    @property
    def k(self):
        first = next(iter(self.views.values()))
        return first.k if first.kind == "mcq" else None


@dataclass
class Alignment:
    instances: list
    dropped: list = field(default_factory=list)


@dataclass(frozen=True)
class ContaminationCondition:
    p: int
    seed: int
    selected_ids: frozenset

    def __contains__(self, item_id):
        return item_id in self.selected_ids


@dataclass
class CorpusStats:
    kind: str
    language: str
    n_items: int
    n_tokens: int
    vocab_size: int
    ttr_percent: float
    n_subjects: Optional[int] = None
    overlap_mean: Optional[float] = None
    overlap_p90: Optional[float] = None
    overlap_p99: Optional[float] = None
    answer_len_mean: Optional[float] = None
    answer_len_median: Optional[float] = None
    answer_len_p90: Optional[float] = None
    answer_len_p99: Optional[float] = None

    def to_dict(self):
        return dict(self.__dict__)


# === LOADING ===
def _read_records(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError("file not found", path=path)

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"malformed record: {e.msg}", path=path, line=lineno)
            if not isinstance(record, dict):
                raise DatasetError("malformed record: not an object", path=path, line=lineno)
            yield lineno, record


def _text_field(record, name, path, lineno):
    value = record.get(name)
    if not isinstance(value, str) or not value.strip():
        raise DatasetError(
            "missing or empty text", path=path, line=lineno, field=name, item_id=record.get("id")
        )
    return value


def _int_field(record, name, path, lineno, optional=False):
    value = record.get(name)
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetError(
            "expected an integer", path=path, line=lineno, field=name, item_id=record.get("id")
        )
    return value


def _language_field(record, language, path, lineno):
    found = record.get("language", language)
    if not isinstance(found, str) or not found:
        raise DatasetError("missing language", path=path, line=lineno, field="language")
    if language is not None and found != language:
        raise DatasetError(
            f"language {found!r} does not match expected {language!r}",
            path=path,
            line=lineno,
            field="language",
        )
    return found


def _check_unique(seen, item_id, path, lineno):
    if item_id in seen:
        raise DatasetError(
            f"duplicate id {item_id!r} (first seen on line {seen[item_id]})",
            path=path,
            line=lineno,
            field="id",
            item_id=item_id,
        )
    seen[item_id] = lineno


def _parse_mcq(record, language, path, lineno):
    item_id = _text_field(record, "id", path, lineno)
    question = _text_field(record, "question", path, lineno)

    choices = record.get("choices")
    if not isinstance(choices, list) or len(choices) < 2:
        raise DatasetError(
            "choices must be a list of at least 2 texts",
            path=path,
            line=lineno,
            field="choices",
            item_id=item_id,
        )
    for i, choice in enumerate(choices):
        if not isinstance(choice, str) or not choice.strip():
            raise DatasetError(
                f"choice {i} is empty", path=path, line=lineno, field="choices", item_id=item_id
            )

    gold_index = _int_field(record, "gold_index", path, lineno)
    if not 0 <= gold_index < len(choices):
        raise DatasetError(
            f"gold_index out of range: {gold_index} with {len(choices)} choices",
            path=path,
            line=lineno,
            field="gold_index",
            item_id=item_id,
        )

    subject = record.get("subject")
    if subject is not None and not isinstance(subject, str):
        raise DatasetError("subject must be text", path=path, line=lineno, field="subject")

    return McqItem(
        id=item_id,
        question=question,
        choices=tuple(choices),
        gold_index=gold_index,
        language=_language_field(record, language, path, lineno),
        subject=subject,
    )


def _parse_qa(record, language, path, lineno):
    item_id = _text_field(record, "id", path, lineno)
    context = _text_field(record, "context", path, lineno)
    question = _text_field(record, "question", path, lineno)
    answer_text = _text_field(record, "answer_text", path, lineno)

    start = _int_field(record, "answer_char_start", path, lineno, optional=True)
    if start is not None and not context.startswith(answer_text, start):
        raise DatasetError(
            f"context at offset {start} does not begin with the answer text",
            path=path,
            line=lineno,
            field="answer_char_start",
            item_id=item_id,
        )

    return QaItem(
        id=item_id,
        context=context,
        question=question,
        answer_text=answer_text,
        language=_language_field(record, language, path, lineno),
        answer_char_start=start,
    )


def _load(path, language, parse):
    items = []
    seen = {}
    for lineno, record in _read_records(path):
        item = parse(record, language, path, lineno)
        _check_unique(seen, item.id, path, lineno)
        items.append(item)

    logger.info("Loaded %d records from %s", len(items), path)
    return items


def load_mcq_dataset(path, language):
    return _load(path, language, _parse_mcq)


def load_qa_dataset(path, language):
    return _load(path, language, _parse_qa)


def load_dataset(path, language=None):
    """Load a dataset file, sniffing MCQ vs QA from its first record."""
    first = next(_read_records(path), None)
    if first is None:
        raise DatasetError("empty dataset", path=path)

    _, record = first
    if language is None:
        language = record.get("language")
    if "choices" in record:
        return load_mcq_dataset(path, language)
    return load_qa_dataset(path, language)


def dump_dataset(items, path):
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item.to_record(), ensure_ascii=False) + "\n")


def dataset_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# === ALIGNMENT ===
def align_parallel(datasets, languages=None):
    """
    Join per-language datasets on their shared id.

    Only ids present in every language survive; MCQ views of one id must agree
    on the number of choices and on the gold index.
    """
    if languages is None:
        languages = list(datasets)
    missing = [lang for lang in languages if lang not in datasets]
    if missing:
        raise DatasetError(f"no dataset for language(s): {', '.join(missing)}")
    if not languages:
        raise DatasetError("no datasets to align")

    by_language = {lang: {item.id: item for item in datasets[lang]} for lang in languages}

    kinds = {item.kind for lang in languages for item in datasets[lang]}
    if len(kinds) > 1:
        raise DatasetError(f"cannot align mixed dataset kinds: {sorted(kinds)}")

    frames = [pd.DataFrame({"id": [item.id for item in datasets[lang]]}) for lang in languages]
    for lang, df in zip(languages, frames):
        logger.info("%s: %d ids", lang, len(df))

    merged = reduce(lambda left, right: left.merge(right, on="id", how="inner"), frames)
    kept = merged["id"].tolist()

    all_ids = set().union(*(set(ids) for ids in by_language.values()))
    dropped = sorted(all_ids - set(kept))
    logger.info("After aligning %s: %d instances, %d ids dropped", languages, len(kept), len(dropped))

    instances = []
    for item_id in kept:
        views = {lang: by_language[lang][item_id] for lang in languages}
        _check_mcq_agreement(item_id, views)
        instances.append(ParallelInstance(canonical_id=item_id, views=views))

    return Alignment(instances=instances, dropped=dropped)


def _check_mcq_agreement(item_id, views):
    items = list(views.items())
    first_lang, first = items[0]
    if first.kind != "mcq":
        return
    for lang, item in items[1:]:
        if item.k != first.k:
            raise DatasetError(
                f"K mismatch for id {item_id!r}: {first.k} in {first_lang}, {item.k} in {lang}",
                item_id=item_id,
            )
        if item.gold_index != first.gold_index:
            raise DatasetError(
                f"gold_index mismatch for id {item_id!r}: "
                f"{first.gold_index} in {first_lang}, {item.gold_index} in {lang}",
                item_id=item_id,
            )


# === CONTAMINATION SUBSETS ===
def _instance_id(instance):
    return getattr(instance, "canonical_id", None) or instance.id


def select_contaminated_subset(instances, p, seed):
    """
    Pick floor(p * N / 100) ids: one seeded shuffle of the sorted ids, then a
    prefix. The shuffle does not depend on p, so subsets nest as p grows.
    """
    if isinstance(p, bool) or not isinstance(p, int) or not 0 <= p <= 100:
        raise ConfigError(f"contamination level p must be an integer in [0, 100], got {p!r}")

    ids = sorted(_instance_id(instance) for instance in instances)
    order = keyed_rng(seed, "contamination").permutation(len(ids))
    n_selected = p * len(ids) // 100
    selected = frozenset(ids[i] for i in order[:n_selected])

    return ContaminationCondition(p=p, seed=seed, selected_ids=selected)


# === STATISTICS ===
def _item_texts(item):
    if item.kind == "mcq":
        return [item.question, *item.choices]
    return [item.context, item.question, item.answer_text]


def token_frequencies(items):
    counts = Counter()
    for item in items:
        for text in _item_texts(item):
            counts.update(tokenize(text))
    return counts


def corpus_stats(items):
    if not items:
        raise DatasetError("empty dataset")

    counts = token_frequencies(items)
    n_tokens = sum(counts.values())
    first = items[0]

    stats = CorpusStats(
        kind=first.kind,
        language=first.language,
        n_items=len(items),
        n_tokens=n_tokens,
        vocab_size=len(counts),
        ttr_percent=100.0 * len(counts) / n_tokens if n_tokens else 0.0,
    )

    if first.kind == "mcq":
        subjects = {item.subject for item in items if item.subject}
        stats.n_subjects = len(subjects) if subjects else None
        return stats

    overlaps = []
    answer_lengths = []
    for item in items:
        question_tokens = set(tokenize(item.question))
        if question_tokens:
            shared = question_tokens & set(tokenize(item.context))
            overlaps.append(100.0 * len(shared) / len(question_tokens))
        answer_lengths.append(len(tokenize(item.answer_text)))

    if overlaps:
        stats.overlap_mean = float(np.mean(overlaps))
        stats.overlap_p90 = nearest_rank_percentile(overlaps, 90)
        stats.overlap_p99 = nearest_rank_percentile(overlaps, 99)

    stats.answer_len_mean = float(np.mean(answer_lengths))
    stats.answer_len_median = nearest_rank_percentile(answer_lengths, 50)
    stats.answer_len_p90 = nearest_rank_percentile(answer_lengths, 90)
    stats.answer_len_p99 = nearest_rank_percentile(answer_lengths, 99)

    return stats

