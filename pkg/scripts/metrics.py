import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from corpus import tokenize
from errors import CapabilityError, ConfigError, MetricError

COLLAPSE_MASS = 0.9


@dataclass(frozen=True)
class ProbeRecord:
    run_id: str
    probe: str
    canonical_id: str
    language: str
    condition: Optional[int]
    predicted_kind: Optional[str] = None
    predicted_display_index: Optional[int] = None
    predicted_canonical_choice: Optional[int] = None
    predicted_text: Optional[str] = None
    original_gold_index: Optional[int] = None
    displayed_gold_index: Optional[int] = None
    permutation: Optional[tuple] = None
    k: Optional[int] = None
    idr_hit: Optional[bool] = None
    correct: Optional[bool] = None
    reference: Optional[str] = None
    em_hit: Optional[bool] = None
    rouge_l_f1: Optional[float] = None
    member: Optional[bool] = None
    min_k: Optional[float] = None
    min_k_pp: Optional[float] = None
    skip_reason: Optional[str] = None
    error: Optional[str] = None

    @property
    def key(self):
        return (self.run_id, self.canonical_id, self.language, self.probe)

    @property
    def usable(self):
        return self.skip_reason is None and self.error is None

    def sort_key(self):
        return (
            -1 if self.condition is None else self.condition,
            self.probe,
            self.canonical_id,
            self.language,
        )


def usable(records):
    return [r for r in records if r.usable]


def cell_counts(records):
    return {
        "n": sum(1 for r in records if r.usable),
        "skips": sum(1 for r in records if r.skip_reason is not None),
        "errors": sum(1 for r in records if r.error is not None and r.skip_reason is None),
    }


# === TEXT OVERLAP ===
def _lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, 1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l_f1(prediction, reference):
    pred_tokens = tokenize(prediction or "")
    ref_tokens = tokenize(reference or "")
    if not pred_tokens or not ref_tokens:
        return 0.0

    lcs = _lcs_length(pred_tokens, ref_tokens)
    if lcs == 0:
        return 0.0

    precision = lcs / len(pred_tokens)
    recall = lcs / len(ref_tokens)
    return 2 * precision * recall / (precision + recall)


_EDGE_PUNCT = re.compile(r"^[\W_]+|[\W_]+$")


def normalize_answer(text):
    text = " ".join(text.lower().split())
    return _EDGE_PUNCT.sub("", text)


def exact_match(prediction, reference):
    return normalize_answer(prediction or "") == normalize_answer(reference or "")


# === INDEX RECALL AND CROSS-LINGUAL CONSISTENCY ===
def index_recall_rate(records):
    """Share of usable records whose prediction is the original pre-shuffle gold index."""
    cell = usable(records)
    if not cell:
        raise MetricError("empty cell: no usable records for index recall")
    return sum(1 for r in cell if r.idr_hit is True) / len(cell)


def task_accuracy(records):
    cell = [r for r in usable(records) if r.displayed_gold_index is not None]
    if not cell:
        raise MetricError("empty cell: no usable records for accuracy")
    return sum(1 for r in cell if r.correct is True) / len(cell)


def _comparison_value(record, key):
    if key == "choice":
        return record.predicted_canonical_choice
    if key == "letter":
        return record.predicted_display_index
    raise ConfigError(f"unknown consistency key {key!r}")


def consistency_groups(records, languages=None):
    """
    Split records into complete per-instance groups (one usable record per
    language) and the ids of incomplete groups.
    """
    grouped = defaultdict(dict)
    for record in records:
        if record.usable:
            grouped[record.canonical_id][record.language] = record
    if languages is None:
        languages = sorted({r.language for r in records})
    languages = list(languages)

    complete = {}
    excluded = sorted({r.canonical_id for r in records} - set(grouped))
    for canonical_id, by_language in grouped.items():
        if all(lang in by_language for lang in languages):
            complete[canonical_id] = [by_language[lang] for lang in languages]
        else:
            excluded.append(canonical_id)
    return complete, sorted(excluded)


def cross_lingual_consistency(records, languages=None, key="choice"):
    """Share of complete groups whose predictions agree in every language."""
    groups, _ = consistency_groups(records, languages)
    if not groups:
        raise MetricError("empty cell: no complete language groups")

    consistent = 0
    for members in groups.values():
        values = [_comparison_value(r, key) for r in members]
        if None not in values and len(set(values)) == 1:
            consistent += 1
    return consistent / len(groups)


def clc_random_baseline(k, n_languages):
    if isinstance(k, bool) or not isinstance(k, int) or k < 2:
        raise MetricError(f"K must be an integer >= 2, got {k!r}")
    if isinstance(n_languages, bool) or not isinstance(n_languages, int) or n_languages < 1:
        raise MetricError(f"L must be an integer >= 1, got {n_languages!r}")
    return (1 / k) ** (n_languages - 1)


def letter_histogram(records, k):
    """Per-language share of each predicted letter; `collapse` flags single-letter answering."""
    counts = defaultdict(Counter)
    totals = Counter()
    for record in usable(records):
        totals[record.language] += 1
        if record.predicted_display_index is not None:
            counts[record.language][record.predicted_display_index] += 1

    histograms = {
        language: [counts[language][i] / totals[language] for i in range(k)]
        for language in sorted(totals)
    }
    collapse = bool(histograms) and all(
        max(shares) >= COLLAPSE_MASS for shares in histograms.values()
    )
    return histograms, collapse


# === MASK RECOVERY ===
def mean_rouge(records):
    scores = [r.rouge_l_f1 for r in usable(records) if r.rouge_l_f1 is not None]
    return float(np.mean(scores)) if scores else None


def exact_match_rate(records):
    hits = [r.em_hit for r in usable(records) if r.em_hit is not None]
    return sum(hits) / len(hits) if hits else None


def near_miss_rouge(records):
    """Mean ROUGE-L F1 over records that missed the exact token."""
    scores = [
        r.rouge_l_f1
        for r in usable(records)
        if r.em_hit is False and r.rouge_l_f1 is not None
    ]
    return float(np.mean(scores)) if scores else None


# === LIKELIHOOD PROBES ===
def _check_k_percent(k_percent):
    if not 0 < k_percent <= 100:
        raise MetricError(f"k_percent must be in (0, 100], got {k_percent}")


def _bottom_k_mean(values, k_percent):
    values = np.sort(np.asarray(values, dtype=float))
    m = max(1, math.floor(k_percent * len(values) / 100))
    return float(values[:m].mean())


def min_k_score(token_logprobs, k_percent):
    if len(token_logprobs) == 0:
        raise MetricError("no tokens to score")
    _check_k_percent(k_percent)
    return _bottom_k_mean(token_logprobs, k_percent)


def min_k_pp_score(tokens, k_percent):
    """Bottom-k mean of (logprob - dist_mean) / dist_std over the tokens."""
    if len(tokens) == 0:
        raise MetricError("no tokens to score")
    _check_k_percent(k_percent)

    z = []
    for position, token in enumerate(tokens):
        if token.dist_mean is None or token.dist_std is None:
            raise CapabilityError(f"no distribution moments at token position {position}")
        if token.dist_std <= 0:
            raise MetricError(f"dist_std is zero at token position {position}")
        z.append((token.logprob - token.dist_mean) / token.dist_std)
    return _bottom_k_mean(z, k_percent)


def auroc(member_scores, nonmember_scores):
    """Mann-Whitney AUROC: P(member > nonmember), ties counted as one half."""
    n_members = len(member_scores)
    n_nonmembers = len(nonmember_scores)
    if n_members == 0 or n_nonmembers == 0:
        raise MetricError("AUROC needs scores on both sides")

    ranks = rankdata(np.concatenate([member_scores, nonmember_scores]).astype(float))
    u = ranks[:n_members].sum() - n_members * (n_members + 1) / 2
    return float(u / (n_members * n_nonmembers))
