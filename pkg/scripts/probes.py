"""
Audit protocols: TS-Guessing (MCQ and QA), the Min-K likelihood audit and
translation-aware detection (TACD) over aligned language views.

Every driver fans instances out through the client's bounded pool, records
per-instance failures instead of raising them, and returns records sorted
by key so aggregation never depends on arrival order.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from corpus import token_frequencies
from errors import (
    CapabilityError,
    ConfigError,
    DatasetError,
    EndpointError,
    MetricError,
    SkipInstance,
)
from logging_config import get_logger
from metrics import (
    ProbeRecord,
    auroc,
    clc_random_baseline,
    consistency_groups,
    cross_lingual_consistency,
    exact_match,
    index_recall_rate,
    letter_histogram,
    min_k_pp_score,
    min_k_score,
    rouge_l_f1,
    task_accuracy,
    usable,
)
from modelclient import parse_free_text, parse_mcq_answer, split_fill_response
from perturb import (
    MASK_STRATEGIES,
    PERMUTATION_MODES,
    SCORED_TEXT_VERSIONS,
    build_tacd_views,
    mask_choice,
    mask_question_token,
    permute_choices,
    scored_text,
)

logger = get_logger(__name__)

PROBES = ("ts-mcq", "ts-qa", "mink", "tacd")
DEFAULT_LANGUAGES = ("en", "ar", "fr")
CLC_KEYS = ("choice", "letter")

MINK_PP_VARIANT = "mink++ (as per cited work)"
MINK_FALLBACK_VARIANT = "mink% (fallback: no distribution moments)"


@dataclass
class ProbeConfig:
    probe: str
    languages: Optional[tuple] = None
    k_percent: float = 20.0
    permutation_mode: str = "shared"
    mask_strategy: str = "longest-content-word"
    run_seed: int = 0
    condition_p: Optional[int] = None
    displace_gold: bool = False
    clc_key: str = "choice"
    run_id: Optional[str] = None

    def __post_init__(self):
        if self.probe not in PROBES:
            raise ConfigError(f"unknown probe {self.probe!r}; expected one of {', '.join(PROBES)}")
        if self.languages is None and self.probe == "tacd":
            self.languages = DEFAULT_LANGUAGES
        if self.languages is not None:
            self.languages = tuple(self.languages)
            if len(set(self.languages)) != len(self.languages):
                raise ConfigError(f"repeated language in {list(self.languages)}")

        if self.probe == "tacd" and len(self.languages) < 2:
            raise ConfigError("tacd needs at least 2 languages")
        if self.probe in ("ts-mcq", "ts-qa") and self.languages is not None and len(self.languages) != 1:
            raise ConfigError(f"{self.probe} runs on exactly 1 language, got {list(self.languages)}")

        if not 0 < self.k_percent <= 100:
            raise ConfigError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if self.permutation_mode not in PERMUTATION_MODES:
            raise ConfigError(f"unknown permutation mode {self.permutation_mode!r}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.clc_key not in CLC_KEYS:
            raise ConfigError(f"clc_key must be one of {CLC_KEYS}, got {self.clc_key!r}")
        if self.run_id is None:
            self.run_id = f"{self.probe}-{self.run_seed}"

    def to_dict(self):
        data = asdict(self)
        data["languages"] = list(self.languages) if self.languages else None
        return data


def _record(config, canonical_id, language, **fields):
    return ProbeRecord(
        run_id=config.run_id,
        probe=config.probe,
        canonical_id=canonical_id,
        language=language,
        condition=config.condition_p,
        **fields,
    )


def _guarded(config, canonical_id, language, evaluate):
    """Run one instance; skips and endpoint failures become ledger records."""
    try:
        return evaluate()
    except SkipInstance as e:
        return _record(config, canonical_id, language, skip_reason=e.reason)
    except EndpointError as e:
        logger.warning("%s failed for %s/%s: %s", config.probe, canonical_id, language, e)
        return _record(config, canonical_id, language, error=str(e))


def finalize(records):
    """Sort by key and refuse duplicate keys."""
    seen = set()
    for record in records:
        if record.key in seen:
            raise MetricError(f"duplicate record key {record.key}")
        seen.add(record.key)
    return sorted(records, key=lambda r: r.sort_key())


def _log_ledger(config, records):
    skips = sum(1 for r in records if r.skip_reason is not None)
    errors = sum(1 for r in records if r.error is not None)
    logger.info(
        "%s p=%s: %d records, %d usable, %d skipped, %d failed",
        config.probe,
        config.condition_p,
        len(records),
        len(records) - skips - errors,
        skips,
        errors,
    )


def _mcq_fields(view, parsed):
    index = parsed.index
    return {
        "predicted_kind": parsed.kind,
        "predicted_display_index": index,
        "predicted_canonical_choice": view.canonical_choice(index),
        "original_gold_index": view.original_gold_index,
        "displayed_gold_index": view.displayed_gold_index,
        "permutation": view.permutation.mapping,
        "k": view.k,
        # unparseable answers stay in the cell as misses
        "idr_hit": index is not None and index == view.original_gold_index,
        "correct": index is not None and index == view.displayed_gold_index,
    }


# === TS-GUESSING ===
def run_ts_guessing_mcq(items, client, config, quiet=False):
    """
    Shuffle the choices, hide one incorrect option and ask for both the answer
    letter and the hidden option text.
    """
    seed = config.run_seed

    def evaluate(item):
        def attempt():
            view = permute_choices(item, seed, displace_gold=config.displace_gold)
            view = mask_choice(view, seed)
            response = client.complete(view.prompt, instance_id=item.id)

            answer_part, fill = split_fill_response(response.raw_text)
            parsed = parse_mcq_answer(answer_part, view.k, view.prompt_choices())
            return _record(
                config,
                item.id,
                item.language,
                predicted_text=fill,
                reference=view.reference,
                rouge_l_f1=rouge_l_f1(fill, view.reference),
                em_hit=exact_match(fill, view.reference),
                **_mcq_fields(view, parsed),
            )

        return _guarded(config, item.id, item.language, attempt)

    records = finalize(client.map(evaluate, items, desc="ts-mcq", quiet=quiet))
    _log_ledger(config, records)
    return records


def run_ts_guessing_qa(items, client, config, quiet=False):
    """Mask one content word of each question; the context is shown unchanged."""
    seed = config.run_seed
    frequencies = None
    if config.mask_strategy == "rarest-by-corpus-frequency":
        frequencies = token_frequencies(items)

    def evaluate(item):
        def attempt():
            view = mask_question_token(item, config.mask_strategy, seed, frequencies)
            response = client.complete(view.prompt, instance_id=item.id)

            prediction = parse_free_text(response.raw_text).text or ""
            return _record(
                config,
                item.id,
                item.language,
                predicted_kind="free-text" if prediction else "unparseable",
                predicted_text=prediction,
                reference=view.reference,
                em_hit=exact_match(prediction, view.reference),
                rouge_l_f1=rouge_l_f1(prediction, view.reference),
            )

        return _guarded(config, item.id, item.language, attempt)

    records = finalize(client.map(evaluate, items, desc="ts-qa", quiet=quiet))
    _log_ledger(config, records)
    return records


# === MIN-K ===
@dataclass
class MinkResult:
    records: list
    variant: Optional[str]
    auroc: Optional[float]
    auroc_mink: Optional[float]
    auroc_mink_pp: Optional[float]
    member_scores: list = field(default_factory=list)
    nonmember_scores: list = field(default_factory=list)
    scored_text_versions: dict = field(default_factory=dict)
    capabilities: dict = field(default_factory=dict)


def _side_auroc(records, attribute):
    members = [getattr(r, attribute) for r in records if r.member]
    nonmembers = [getattr(r, attribute) for r in records if r.member is False]
    if None in members or None in nonmembers:
        return None
    try:
        return auroc(members, nonmembers)
    except MetricError as e:
        logger.warning("No %s AUROC: %s", attribute, e)
        return None


def run_mink_audit(benchmark_items, heldout_items, client, config, quiet=False):
    """
    Score the canonical text of every benchmark (member side) and held-out
    (nonmember side) item and compare the two score distributions by AUROC.
    """
    if not benchmark_items:
        raise DatasetError("benchmark set is empty")
    if not heldout_items:
        raise DatasetError("held-out set is empty")
    overlap = {i.id for i in benchmark_items} & {i.id for i in heldout_items}
    if overlap:
        raise DatasetError(f"ids present in both benchmark and held-out sets: {sorted(overlap)[:5]}")

    k_percent = config.k_percent
    labelled = [(item, True) for item in benchmark_items] + [(item, False) for item in heldout_items]

    def evaluate(pair):
        item, member = pair

        def attempt():
            try:
                tokens = client.score_sequence(scored_text(item), instance_id=item.id)
            except CapabilityError as e:
                return _record(config, item.id, item.language, member=member, error=f"capability: {e}")

            min_k_pp = None
            try:
                min_k_pp = min_k_pp_score(tokens, k_percent)
            except CapabilityError:
                pass
            except MetricError as e:
                logger.warning("No Min-K++ score for %s: %s", item.id, e)
            return _record(
                config,
                item.id,
                item.language,
                member=member,
                min_k=min_k_score([t.logprob for t in tokens], k_percent),
                min_k_pp=min_k_pp,
            )

        return _guarded(config, item.id, item.language, attempt)

    records = finalize(client.map(evaluate, labelled, desc="mink", quiet=quiet))
    _log_ledger(config, records)

    scored = usable(records)
    has_moments = bool(scored) and all(r.min_k_pp is not None for r in scored)
    capabilities = {
        "scoring": bool(scored),
        "moments": has_moments,
    }
    if not scored:
        logger.warning("Endpoint scored no sequences; Min-K audit has no AUROC")
        return MinkResult(
            records=records,
            variant=None,
            auroc=None,
            auroc_mink=None,
            auroc_mink_pp=None,
            scored_text_versions=dict(SCORED_TEXT_VERSIONS),
            capabilities=capabilities,
        )

    auroc_mink = _side_auroc(scored, "min_k")
    auroc_mink_pp = _side_auroc(scored, "min_k_pp") if has_moments else None
    if has_moments:
        variant, attribute, headline = MINK_PP_VARIANT, "min_k_pp", auroc_mink_pp
    else:
        logger.info("No distribution moments; falling back to Min-K%%")
        variant, attribute, headline = MINK_FALLBACK_VARIANT, "min_k", auroc_mink

    return MinkResult(
        records=records,
        variant=variant,
        auroc=headline,
        auroc_mink=auroc_mink,
        auroc_mink_pp=auroc_mink_pp,
        member_scores=[getattr(r, attribute) for r in scored if r.member],
        nonmember_scores=[getattr(r, attribute) for r in scored if not r.member],
        scored_text_versions=dict(SCORED_TEXT_VERSIONS),
        capabilities=capabilities,
    )


# === TACD ===
@dataclass
class TacdResult:
    records: list
    languages: tuple
    idr: Optional[float]
    idr_by_language: dict
    n_by_language: dict
    clc: Optional[float]
    clc_groups: int
    clc_excluded: list
    accuracy: Optional[float]
    histograms: dict
    collapse: bool
    idr_baseline: Optional[float]
    clc_baseline: Optional[float]


def _pooled_check(pooled, by_language, counts):
    total = sum(counts.values())
    weighted = sum(by_language[lang] * counts[lang] for lang in by_language) / total
    if not math.isclose(pooled, weighted, rel_tol=1e-9, abs_tol=1e-12):
        raise MetricError(f"pooled IDR {pooled} differs from weighted per-language mean {weighted}")


def run_tacd(instances, client, config, quiet=False):
    """
    Shuffle each instance's choices, ask the plain question in every language
    and measure both index recall and cross-lingual agreement.
    """
    languages = config.languages
    missing = sorted({lang for inst in instances for lang in languages if lang not in inst.views})
    if missing:
        raise DatasetError(f"instances lack language view(s) {', '.join(missing)}; align first")

    def evaluate(instance):
        try:
            views = build_tacd_views(
                instance,
                languages,
                config.run_seed,
                permutation_mode=config.permutation_mode,
                displace_gold=config.displace_gold,
            )
        except SkipInstance as e:
            return [
                _record(config, instance.canonical_id, lang, skip_reason=e.reason) for lang in languages
            ]

        def answer(view):
            def attempt():
                response = client.complete(view.prompt, instance_id=view.canonical_id)
                parsed = parse_mcq_answer(response.raw_text, view.k, view.displayed_choices)
                return _record(
                    config,
                    view.canonical_id,
                    view.language,
                    predicted_text=response.raw_text,
                    **_mcq_fields(view, parsed),
                )

            return _guarded(config, view.canonical_id, view.language, attempt)

        return [answer(view) for view in views]

    per_instance = client.map(evaluate, instances, desc="tacd", quiet=quiet)
    records = finalize([r for group in per_instance for r in group])
    _log_ledger(config, records)

    scored = usable(records)
    n_by_language = {lang: sum(1 for r in scored if r.language == lang) for lang in languages}
    idr_by_language = {}
    for lang in languages:
        if n_by_language[lang]:
            idr_by_language[lang] = index_recall_rate([r for r in scored if r.language == lang])

    idr = accuracy = idr_baseline = None
    if scored:
        idr = index_recall_rate(scored)
        _pooled_check(idr, idr_by_language, n_by_language)
        accuracy = task_accuracy(scored)
        idr_baseline = float(np.mean([1 / r.k for r in scored]))

    groups, excluded = consistency_groups(records, languages)
    clc = clc_baseline = None
    if groups:
        clc = cross_lingual_consistency(records, languages, key=config.clc_key)
        clc_baseline = float(
            np.mean([clc_random_baseline(group[0].k, len(languages)) for group in groups.values()])
        )
    if excluded:
        logger.info("%d instance(s) excluded from CLC (incomplete language groups)", len(excluded))

    k_max = max((r.k for r in scored), default=0)
    histograms, collapse = letter_histogram(records, k_max) if k_max else ({}, False)

    return TacdResult(
        records=records,
        languages=tuple(languages),
        idr=idr,
        idr_by_language=idr_by_language,
        n_by_language=n_by_language,
        clc=clc,
        clc_groups=len(groups),
        clc_excluded=excluded,
        accuracy=accuracy,
        histograms=histograms,
        collapse=collapse,
        idr_baseline=idr_baseline,
        clc_baseline=clc_baseline,
    )
