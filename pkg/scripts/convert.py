"""
Turn public benchmark distributions into line-delimited dataset records.

    python scripts/convert.py squad xquad.ar.json ar data/xquad.ar.jsonl
    python scripts/convert.py mmlu anatomy_test.csv en data/mmlu.en.jsonl --subject anatomy
"""

import argparse
import json
from pathlib import Path

import pandas as pd

from corpus import McqItem, QaItem, dump_dataset
from errors import DatasetError
from logging_config import get_logger
from perturb import LETTERS

logger = get_logger(__name__)

MMLU_COLUMNS = ["question", "A", "B", "C", "D", "answer"]


# === SQUAD-STYLE JSON (XQuAD, MLQA) ===
def convert_squad(path, language):
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read SQuAD-style JSON: {e}", path=path)
    if not isinstance(data, dict) or not isinstance(data.get("data"), list):
        raise DatasetError("missing top-level 'data' list", path=path)

    items = []
    for article in data["data"]:
        for paragraph in article.get("paragraphs", []):
            context = paragraph.get("context")
            for qa in paragraph.get("qas", []):
                answers = qa.get("answers") or []
                if not context or not answers:
                    raise DatasetError("question without context or answers", path=path, item_id=qa.get("id"))
                answer = answers[0]
                items.append(
                    QaItem(
                        id=str(qa["id"]),
                        context=context,
                        question=qa["question"],
                        answer_text=answer["text"],
                        language=language,
                        answer_char_start=answer.get("answer_start"),
                    )
                )

    logger.info("Converted %d questions from %s", len(items), path)
    return items


# === MMLU CSV ===
def convert_mmlu_csv(path, language, subject=None):
    """Headerless rows of (question, A, B, C, D, answer letter)."""
    if subject is None:
        # anatomy_test.csv -> anatomy
        subject = Path(path).stem.rsplit("_", 1)[0]

    try:
        df = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"cannot read MMLU CSV: {e}", path=path)
    if df.shape[1] != len(MMLU_COLUMNS):
        raise DatasetError(f"expected {len(MMLU_COLUMNS)} columns, got {df.shape[1]}", path=path)
    df.columns = MMLU_COLUMNS

    items = []
    for row in df.itertuples():
        letter = row.answer.strip().upper()
        if letter not in LETTERS[:4]:
            raise DatasetError(
                f"answer must be one of A-D, got {row.answer!r}", path=path, line=row.Index + 1
            )
        items.append(
            McqItem(
                id=f"{subject}-{row.Index}",
                question=row.question,
                choices=(row.A, row.B, row.C, row.D),
                gold_index=LETTERS.index(letter),
                language=language,
                subject=subject,
            )
        )

    logger.info("Converted %d %s questions from %s", len(items), subject, path)
    return items


def main():
    parser = argparse.ArgumentParser(description="Convert benchmark files to dataset records")
    parser.add_argument("format", choices=["squad", "mmlu"])
    parser.add_argument("source")
    parser.add_argument("language")
    parser.add_argument("out")
    parser.add_argument("--subject")
    args = parser.parse_args()

    if args.format == "squad":
        items = convert_squad(args.source, args.language)
    else:
        items = convert_mmlu_csv(args.source, args.language, args.subject)

    dump_dataset(items, args.out)
    print(f"{len(items)} records written to {args.out}")


if __name__ == "__main__":
    main()
