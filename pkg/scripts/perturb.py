"""
Perturbed evaluation views.

A view is one benchmark instance rendered for the model: choices re-ordered by
a seeded permutation, optionally with one incorrect option (MCQ) or one
question token (QA) replaced by the mask placeholder.
"""

import hashlib
import string
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

from corpus import TOKEN_RE
from errors import ConfigError, DatasetError, SkipInstance
from rng import keyed_index, keyed_rng

REPO_ROOT = Path(__file__).resolve().parent.parent
TEMPLATE_DIR = REPO_ROOT / "templates"
STOPWORD_DIR = REPO_ROOT / "stopwords"

MASK = "[MASK]"
LETTERS = string.ascii_uppercase

PERMUTATION_MODES = ("shared", "per-language")
MASK_STRATEGIES = ("longest-content-word", "rarest-by-corpus-frequency")

SCORED_TEXT_VERSIONS = {"mcq": "mcq-v1", "qa": "qa-v1"}

MIN_CONTENT_WORD = 3


@dataclass(frozen=True)
class Template:
    kind: str
    text: str
    sha256: str

    def render(self, **fields):
        return self.text.format_map(fields)


@lru_cache(maxsize=None)
def load_template(kind):
    path = TEMPLATE_DIR / f"{kind}.txt"
    if not path.exists():
        raise ConfigError(f"unknown prompt template {kind!r} (looked in {TEMPLATE_DIR})")
    text = path.read_text(encoding="utf-8")
    return Template(kind=kind, text=text, sha256=hashlib.sha256(text.encode("utf-8")).hexdigest())


@lru_cache(maxsize=None)
def load_stopwords(language):
    path = STOPWORD_DIR / f"{language}.txt"
    if not path.exists():
        return frozenset()
    with open(path, encoding="utf-8") as f:
        return frozenset(line.strip().lower() for line in f if line.strip())


@dataclass(frozen=True)
class Permutation:
    """mapping[i] is the display slot of original choice i."""

    mapping: tuple

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ConfigError(f"not a permutation: {list(self.mapping)}")

    @property
    def size(self):
        return len(self.mapping)

    @classmethod
    def identity(cls, k):
        return cls(tuple(range(k)))

    def inverse(self):
        inv = [0] * self.size
        for original, slot in enumerate(self.mapping):
            inv[slot] = original
        return Permutation(tuple(inv))

    def compose(self, other):
        """(self after other): i -> self.mapping[other.mapping[i]]"""
        return Permutation(tuple(self.mapping[j] for j in other.mapping))

    def apply(self, choices):
        displayed = [None] * self.size
        for original, slot in enumerate(self.mapping):
            displayed[slot] = choices[original]
        return tuple(displayed)


def invert(permutation):
    return permutation.inverse()


@dataclass(frozen=True)
class MaskedToken:
    surface: str
    position: int


@dataclass(frozen=True)
class EvalView:
    canonical_id: str
    language: str
    kind: str
    prompt: str
    template: str
    seed_trace: tuple
    permutation: Optional[Permutation] = None
    displayed_choices: tuple = ()
    displayed_gold_index: Optional[int] = None
    original_gold_index: Optional[int] = None
    question: str = ""
    context: Optional[str] = None
    masked_display_slot: Optional[int] = None
    masked_token: Optional[MaskedToken] = None
    reference: Optional[str] = None

    @property
    def k(self):
        return len(self.displayed_choices)

    @property
    def masked(self):
        return self.masked_display_slot is not None or self.masked_token is not None

    def canonical_choice(self, display_index):
        """Pre-shuffle choice identity of a displayed slot."""
        if display_index is None or self.permutation is None:
            return None
        return self.permutation.inverse().mapping[display_index]

    def prompt_choices(self):
        """Displayed choices as the model sees them (mask placeholder included)."""
        if self.masked_display_slot is None:
            return self.displayed_choices
        shown = list(self.displayed_choices)
        shown[self.masked_display_slot] = MASK
        return tuple(shown)


def render_choices(choices):
    return "\n".join(f"{LETTERS[i]}. {text}" for i, text in enumerate(choices))


def render_mcq_prompt(question, choices, template):
    return load_template(template).render(question=question, choices=render_choices(choices))


# === CHOICE PERMUTATIONS ===
def _check_k(k, item_id):
    if k < 2:
        raise DatasetError(f"need at least 2 choices, got {k}", item_id=item_id)
    if k > len(LETTERS):
        raise DatasetError(f"at most {len(LETTERS)} choices can be lettered, got {k}", item_id=item_id)


def sample_permutation(k, run_seed, *key, displace_gold_index=None):
    """
    Uniform permutation of k slots from the stream (run_seed, "permute", *key).
    With displace_gold_index set, draws are rejected until that index moves.
    """
    rng = keyed_rng(run_seed, "permute", *key)
    while True:
        mapping = tuple(int(x) for x in rng.permutation(k))
        if displace_gold_index is None or mapping[displace_gold_index] != displace_gold_index:
            return Permutation(mapping)


def apply_permutation(item, permutation, run_seed, template="tacd_mcq"):
    _check_k(item.k, item.id)
    if permutation.size != item.k:
        raise ConfigError(f"permutation of size {permutation.size} for {item.k} choices")

    displayed = permutation.apply(item.choices)
    return EvalView(
        canonical_id=item.id,
        language=item.language,
        kind="mcq",
        prompt=render_mcq_prompt(item.question, displayed, template),
        template=template,
        seed_trace=(run_seed, item.id),
        permutation=permutation,
        displayed_choices=displayed,
        displayed_gold_index=permutation.mapping[item.gold_index],
        original_gold_index=item.gold_index,
        question=item.question,
    )


def permute_choices(item, run_seed, displace_gold=False, language_scoped=False, template="tacd_mcq"):
    _check_k(item.k, item.id)
    key = (item.id, item.language) if language_scoped else (item.id,)
    permutation = sample_permutation(
        item.k,
        run_seed,
        *key,
        displace_gold_index=item.gold_index if displace_gold else None,
    )
    return apply_permutation(item, permutation, run_seed, template)


def mask_choice(view, run_seed, template="ts_mcq"):
    """Hide the text of one incorrect displayed option, chosen uniformly."""
    if view.masked:
        raise ConfigError(f"view {view.canonical_id} is already masked")
    if view.k < 2:
        raise DatasetError("no incorrect option to mask", item_id=view.canonical_id)

    candidates = [slot for slot in range(view.k) if slot != view.displayed_gold_index]
    slot = candidates[keyed_index(run_seed, len(candidates), "mask", view.canonical_id)]

    masked = replace(view, masked_display_slot=slot, reference=view.displayed_choices[slot])
    return replace(
        masked,
        prompt=render_mcq_prompt(view.question, masked.prompt_choices(), template),
        template=template,
    )


# === QUESTION TOKEN MASKING ===
def _content_tokens(question, language):
    stopwords = load_stopwords(language)
    for position, match in enumerate(TOKEN_RE.finditer(question)):
        word = match.group(0)
        if len(word) >= MIN_CONTENT_WORD and word.lower() not in stopwords:
            yield position, match


def mask_question_token(
    item,
    strategy="longest-content-word",
    run_seed=0,
    frequencies=None,
    template="ts_qa",
):
    """
    Replace one content word of the question with the mask placeholder.

    longest-content-word picks the longest candidate; rarest-by-corpus-frequency
    picks the one with the lowest count in `frequencies`. Ties go to the
    earliest position. The context is passed through untouched.
    """
    if strategy not in MASK_STRATEGIES:
        raise ConfigError(f"unknown mask strategy {strategy!r}")
    if strategy == "rarest-by-corpus-frequency" and frequencies is None:
        raise ConfigError("rarest-by-corpus-frequency needs corpus token frequencies")

    candidates = list(_content_tokens(item.question, item.language))
    if not candidates:
        raise SkipInstance("no maskable token in question", item_id=item.id)

    if strategy == "longest-content-word":
        position, match = min(candidates, key=lambda c: (-len(c[1].group(0)), c[0]))
    else:
        position, match = min(
            candidates, key=lambda c: (frequencies.get(c[1].group(0).lower(), 0), c[0])
        )

    start, end = match.span()
    masked_question = item.question[:start] + MASK + item.question[end:]

    return EvalView(
        canonical_id=item.id,
        language=item.language,
        kind="qa",
        prompt=load_template(template).render(context=item.context, question=masked_question),
        template=template,
        seed_trace=(run_seed, item.id),
        question=masked_question,
        context=item.context,
        masked_token=MaskedToken(surface=match.group(0), position=position),
        reference=match.group(0),
    )


# === TACD VIEWS ===
def build_tacd_views(
    instance,
    languages,
    run_seed,
    permutation_mode="shared",
    displace_gold=False,
    template="tacd_mcq",
):
    """
    One plain (unmasked) view per language. In shared mode a single permutation
    is drawn per instance and used in every language; in per-language mode each
    language draws its own.
    """
    if permutation_mode not in PERMUTATION_MODES:
        raise ConfigError(f"unknown permutation mode {permutation_mode!r}")
    missing = [lang for lang in languages if lang not in instance.views]
    if missing:
        raise DatasetError(
            f"missing language view(s) {', '.join(missing)}", item_id=instance.canonical_id
        )

    views = []
    for language in languages:
        item = instance.views[language]
        views.append(
            permute_choices(
                item,
                run_seed,
                displace_gold=displace_gold,
                language_scoped=permutation_mode == "per-language",
                template=template,
            )
        )
    return views


# === LIKELIHOOD PROBE SERIALIZATION ===
def scored_text(item):
    """Canonical text scored by the likelihood probe (versions in SCORED_TEXT_VERSIONS)."""
    if item.kind == "mcq":
        return (
            f"{item.question}\n{render_choices(item.choices)}\n"
            f"Answer: {LETTERS[item.gold_index]}"
        )
    return f"{item.question}\n{item.answer_text}"
