"""
Audit reports.

Three artifacts per run: the JSON report (schema-validated, no wall-clock
content, so identical runs give identical bytes), a flat per-record CSV
table and a run manifest that also carries the timestamps.
"""

import hashlib
import json
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path

import jsonschema
import pandas as pd

from errors import ConfigError
from logging_config import get_logger
from metrics import (
    ProbeRecord,
    cell_counts,
    exact_match_rate,
    index_recall_rate,
    mean_rouge,
    near_miss_rouge,
    task_accuracy,
    usable,
)

logger = get_logger(__name__)

SCHEMA_VERSION = 1
SCHEMA_PATH = Path(__file__).resolve().parent.parent / "schema" / "report.schema.json"
TREND_METRICS = ("idr", "clc")


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_digest(data):
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


# === BLOCKS ===
def _ledger(records):
    return {
        "errors": [
            {"id": r.canonical_id, "language": r.language, "error": r.error}
            for r in records
            if r.error is not None and r.skip_reason is None
        ],
        "skips": [
            {"id": r.canonical_id, "language": r.language, "reason": r.skip_reason}
            for r in records
            if r.skip_reason is not None
        ],
    }


def _base_block(probe, p, records):
    block = {"probe": probe, "p": p, "ledger": _ledger(records)}
    block.update(cell_counts(records))
    return block


def _mcq_baseline(records):
    ks = [r.k for r in usable(records) if r.k]
    return sum(1 / k for k in ks) / len(ks) if ks else None


def ts_mcq_block(records, p=None):
    block = _base_block("ts-mcq", p, records)
    has_usable = block["n"] > 0
    block.update(
        idr=index_recall_rate(records) if has_usable else None,
        idr_baseline=_mcq_baseline(records),
        accuracy=task_accuracy(records) if has_usable else None,
        rouge_l_f1=mean_rouge(records),
        em=exact_match_rate(records),
    )
    return block


def ts_qa_block(records, p=None):
    block = _base_block("ts-qa", p, records)
    block.update(
        em=exact_match_rate(records),
        rouge_l_f1=mean_rouge(records),
        near_miss_rouge_l_f1=near_miss_rouge(records),
    )
    return block


def mink_block(result, p=None):
    block = _base_block("mink", p, result.records)
    scored = usable(result.records)
    block.update(
        mink_variant=result.variant,
        auroc=result.auroc,
        auroc_mink=result.auroc_mink,
        auroc_mink_pp=result.auroc_mink_pp,
        auroc_baseline=0.5,
        n_members=sum(1 for r in scored if r.member),
        n_nonmembers=sum(1 for r in scored if r.member is False),
        member_scores=result.member_scores,
        nonmember_scores=result.nonmember_scores,
        scored_text_versions=result.scored_text_versions,
        capabilities=result.capabilities,
    )
    return block


def tacd_block(result, p=None):
    block = _base_block("tacd", p, result.records)
    block.update(
        languages=list(result.languages),
        idr=result.idr,
        idr_baseline=result.idr_baseline,
        idr_by_language=result.idr_by_language,
        n_by_language=result.n_by_language,
        clc=result.clc,
        clc_baseline=result.clc_baseline,
        clc_groups=result.clc_groups,
        clc_excluded=result.clc_excluded,
        accuracy=result.accuracy,
        letter_histograms=result.histograms,
        collapse=result.collapse,
    )
    return block


def build_block(probe, result, p=None):
    if probe == "ts-mcq":
        return ts_mcq_block(result, p)
    if probe == "ts-qa":
        return ts_qa_block(result, p)
    if probe == "mink":
        return mink_block(result, p)
    if probe == "tacd":
        return tacd_block(result, p)
    raise ConfigError(f"unknown probe {probe!r}")


def result_records(result):
    return result if isinstance(result, list) else result.records


def trend_flags(blocks):
    """Per metric: strictly increasing across blocks ordered by p. None for a single block."""
    if len(blocks) < 2:
        return None
    ordered = sorted(blocks, key=lambda b: b["p"])
    trends = {}
    for metric in TREND_METRICS:
        values = [b.get(metric) for b in ordered]
        if any(v is None for v in values):
            continue
        trends[metric] = {
            "p": [b["p"] for b in ordered],
            "values": values,
            "monotone": all(a < b for a, b in zip(values, values[1:])),
        }
    return trends


def build_report(run, blocks):
    report = {
        "schema_version": SCHEMA_VERSION,
        "run": run,
        "blocks": sorted(blocks, key=lambda b: (-1 if b["p"] is None else b["p"], b["probe"])),
    }
    trends = trend_flags(blocks)
    if trends is not None:
        report["trends"] = trends
    return report


# === WRITING ===
@lru_cache(maxsize=None)
def load_schema():
    with open(SCHEMA_PATH, encoding="utf-8") as f:
        return json.load(f)


def validate_report(report):
    try:
        jsonschema.validate(report, load_schema())
    except jsonschema.ValidationError as e:
        path = "/".join(str(part) for part in e.absolute_path)
        raise ConfigError(f"report does not match schema at '{path}': {e.message}")


def render_report(report):
    validate_report(report)
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_report(report, path):
    text = render_report(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Report written to %s", path)
    return path


def write_record_table(records, path):
    rows = []
    for record in sorted(records, key=lambda r: r.sort_key()):
        row = asdict(record)
        if row["permutation"] is not None:
            row["permutation"] = " ".join(str(slot) for slot in row["permutation"])
        rows.append(row)

    columns = list(ProbeRecord.__dataclass_fields__)
    df = pd.DataFrame(rows, columns=columns)
    df.to_csv(path, index=False)
    logger.info("%d records written to %s", len(df), path)
    return path


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


# === HUMAN SUMMARY ===
def _fmt(value, digits=3):
    return "n/a" if value is None else f"{value:.{digits}f}"


def summary_lines(block):
    label = block["probe"] if block["p"] is None else f"{block['probe']} p={block['p']}"
    lines = [f"{label}: N={block['n']} skips={block['skips']} errors={block['errors']}"]

    if block.get("idr") is not None:
        lines.append(f"  IDR {_fmt(block['idr'], 2)} vs chance {_fmt(block['idr_baseline'], 2)}")
    if block.get("clc") is not None:
        lines.append(f"  CLC {_fmt(block['clc'])} vs chance {_fmt(block['clc_baseline'], 4)}")
    if block.get("accuracy") is not None:
        lines.append(f"  accuracy {_fmt(block['accuracy'])}")
    if block["probe"] in ("ts-mcq", "ts-qa"):
        lines.append(f"  EM {_fmt(block.get('em'))}  ROUGE-L F1 {_fmt(block.get('rouge_l_f1'))}")
    if block["probe"] == "mink":
        lines.append(f"  AUROC {_fmt(block['auroc'])} vs chance 0.500 [{block['mink_variant']}]")
    if block.get("collapse"):
        lines.append("  collapse: a single letter carries >= 90% of answers in every language")
    return lines


def trend_lines(trends):
    return [
        f"{metric} trend over p={info['p']}: monotone: {str(info['monotone']).lower()}"
        for metric, info in sorted((trends or {}).items())
    ]
