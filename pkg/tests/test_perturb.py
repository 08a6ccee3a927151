import itertools
from collections import Counter

import pytest

from conftest import make_mcq_items, make_parallel
from corpus import McqItem, ParallelInstance, QaItem
from errors import ConfigError, DatasetError, SkipInstance
from perturb import (
    MASK,
    Permutation,
    apply_permutation,
    build_tacd_views,
    invert,
    load_template,
    mask_choice,
    mask_question_token,
    permute_choices,
    sample_permutation,
    scored_text,
)

ITEM = McqItem(
    id="q1",
    question="What is the capital of France?",
    choices=("Berlin", "Paris", "Madrid", "Rome"),
    gold_index=1,
    language="en",
)


def test_permutation_apply_and_inverse():
    perm = Permutation((2, 0, 3, 1))
    assert perm.apply(("a", "b", "c", "d")) == ("b", "d", "a", "c")
    assert perm.compose(invert(perm)) == Permutation.identity(4)
    assert invert(perm).compose(perm) == Permutation.identity(4)


def test_not_a_permutation():
    with pytest.raises(ConfigError):
        Permutation((0, 0, 1))


def test_apply_permutation_tracks_gold():
    view = apply_permutation(ITEM, Permutation((2, 0, 3, 1)), run_seed=0)
    assert view.displayed_choices == ("Paris", "Rome", "Berlin", "Madrid")
    assert view.displayed_gold_index == 0
    assert view.original_gold_index == 1
    assert view.canonical_choice(0) == 1
    assert "A. Paris\nB. Rome\nC. Berlin\nD. Madrid" in view.prompt
    assert view.template == "tacd_mcq"


def test_sample_permutation_is_keyed():
    first = sample_permutation(4, 7, "q1")
    assert sample_permutation(4, 7, "q1") == first
    draws = {sample_permutation(4, 7, f"q{i}").mapping for i in range(50)}
    assert len(draws) > 10


def test_displace_gold_never_leaves_gold_in_place():
    for item in make_mcq_items(300):
        view = permute_choices(item, run_seed=1, displace_gold=True)
        assert view.displayed_gold_index != item.gold_index


def test_unrestricted_permutations_keep_gold_in_place_about_a_quarter_of_the_time():
    items = make_mcq_items(2000)
    fixed = sum(
        permute_choices(item, run_seed=2).displayed_gold_index == item.gold_index for item in items
    )
    assert 0.22 <= fixed / len(items) <= 0.28


def test_mask_choice_hides_an_incorrect_option():
    for item in make_mcq_items(200):
        view = mask_choice(permute_choices(item, run_seed=3), run_seed=3)
        assert view.masked_display_slot != view.displayed_gold_index
        assert view.reference == view.displayed_choices[view.masked_display_slot]
        assert view.prompt_choices()[view.masked_display_slot] == MASK
        assert view.reference not in view.prompt
        assert view.template == "ts_mcq"


def test_every_permutation_of_four_is_equally_likely():
    counts = Counter(sample_permutation(4, 11, f"q{i}").mapping for i in range(24000))
    assert set(counts) == set(itertools.permutations(range(4)))
    for mapping, count in counts.items():
        assert abs(count / 24000 - 1 / 24) <= 0.01, mapping


def test_mask_choice_picks_incorrect_slots_uniformly():
    item = McqItem(id="q2", question="Pick one.", choices=("w", "x", "y", "z"), gold_index=2, language="en")
    identity = Permutation.identity(4)
    counts = Counter(
        mask_choice(apply_permutation(item, identity, seed), seed).masked_display_slot for seed in range(3000)
    )
    assert set(counts) == {0, 1, 3}
    for slot in (0, 1, 3):
        assert abs(counts[slot] / 3000 - 1 / 3) <= 0.03


def _common_length(a, b):
    return sum(1 for _ in itertools.takewhile(lambda pair: pair[0] == pair[1], zip(a, b)))


def test_masked_prompt_differs_in_exactly_one_span():
    for seed in range(50):
        view = permute_choices(ITEM, run_seed=seed, template="ts_mcq")
        masked = mask_choice(view, run_seed=seed)
        before, after = view.prompt.encode(), masked.prompt.encode()

        prefix = _common_length(before, after)
        suffix = _common_length(before[::-1], after[::-1])
        assert before[prefix : len(before) - suffix] == masked.reference.encode()
        assert after[prefix : len(after) - suffix] == MASK.encode()


def test_mask_choice_is_deterministic_and_single_use():
    view = permute_choices(ITEM, run_seed=4)
    first = mask_choice(view, run_seed=4)
    assert mask_choice(view, run_seed=4) == first
    with pytest.raises(ConfigError):
        mask_choice(first, run_seed=4)


def test_mask_longest_content_word():
    item = QaItem(
        id="x", context="ctx", question="Which river flows through Egypt?", answer_text="Nile", language="en"
    )
    view = mask_question_token(item, "longest-content-word")
    # "which" and "through" are stopwords; river, flows and egypt tie at 5
    assert view.reference == "river"
    assert view.question == f"Which {MASK} flows through Egypt?"
    assert view.masked_token.position == 1
    assert view.context == "ctx"
    assert "Context: ctx" in view.prompt


def test_mask_skips_stopwords():
    item = QaItem(id="x", context="c", question="Where does water boil?", answer_text="a", language="en")
    view = mask_question_token(item, "longest-content-word")
    # "where" and "does" are stopwords
    assert view.reference == "water"


def test_mask_rarest_by_corpus_frequency():
    item = QaItem(
        id="x", context="c", question="Which river flows through Egypt?", answer_text="a", language="en"
    )
    frequencies = {"river": 9, "flows": 1, "through": 4, "egypt": 1}
    view = mask_question_token(item, "rarest-by-corpus-frequency", frequencies=frequencies)
    assert view.reference == "flows"


def test_mask_needs_frequencies_for_rarest():
    item = QaItem(id="x", context="c", question="Which river?", answer_text="a", language="en")
    with pytest.raises(ConfigError):
        mask_question_token(item, "rarest-by-corpus-frequency")


@pytest.mark.parametrize("question", ["Who won?", "Who is it?"])
def test_no_maskable_token_skips(question):
    item = QaItem(id="x", context="c", question=question, answer_text="a", language="en")
    with pytest.raises(SkipInstance, match="no maskable token"):
        mask_question_token(item, "longest-content-word")


def test_shared_mode_uses_one_permutation_for_every_language():
    datasets = make_parallel(50)
    for i in range(50):
        instance = ParallelInstance(f"s{i:05d}", {lang: datasets[lang][i] for lang in datasets})
        views = build_tacd_views(instance, ["en", "ar", "fr"], run_seed=5, permutation_mode="shared")
        assert len({view.permutation for view in views}) == 1
        assert [view.language for view in views] == ["en", "ar", "fr"]
        assert not any(view.masked for view in views)


def test_per_language_mode_draws_independently():
    datasets = make_parallel(50)
    differing = 0
    for i in range(50):
        instance = ParallelInstance(f"s{i:05d}", {lang: datasets[lang][i] for lang in datasets})
        views = build_tacd_views(instance, ["en", "ar", "fr"], run_seed=5, permutation_mode="per-language")
        differing += len({view.permutation for view in views}) > 1
    assert differing > 25


def test_tacd_views_need_every_language():
    instance = ParallelInstance("q1", {"en": ITEM})
    with pytest.raises(DatasetError, match="missing language view"):
        build_tacd_views(instance, ["en", "fr"], run_seed=0)


def test_unknown_mode_and_template():
    instance = ParallelInstance("q1", {"en": ITEM})
    with pytest.raises(ConfigError):
        build_tacd_views(instance, ["en"], run_seed=0, permutation_mode="sometimes")
    with pytest.raises(ConfigError):
        load_template("nope")


def test_template_hash_is_stable():
    template = load_template("ts_mcq")
    assert len(template.sha256) == 64
    assert "{question}" in template.text


def test_scored_text_formats():
    assert scored_text(ITEM) == (
        "What is the capital of France?\nA. Berlin\nB. Paris\nC. Madrid\nD. Rome\nAnswer: B"
    )
    qa = QaItem(id="x", context="c", question="Which river?", answer_text="The Nile", language="en")
    assert scored_text(qa) == "Which river?\nThe Nile"
