import concurrent.futures

import pytest
import requests
from scipy.stats import mannwhitneyu

from conftest import make_mcq_items, make_qa_items
from errors import ConfigError
from mockmodel import MockConfig, MockManifest, MockModel, MockPromptError
from perturb import LETTERS, mask_choice, mask_question_token, permute_choices, scored_text

ITEMS = make_mcq_items(200)
IDS = frozenset(item.id for item in ITEMS)


def model(items=ITEMS, **settings):
    return MockModel(MockConfig(**settings), MockManifest(items))


def letter_of(reply):
    return LETTERS.index(reply.splitlines()[0].removeprefix("Answer: "))


# === CONFIG ===
@pytest.mark.parametrize(
    "settings",
    [
        {"index_memory_strength": 1.5},
        {"base_accuracy": -0.1},
        {"crosslingual_invariance": 2},
        {"contamination_p": 101},
        {"max_delay_ms": -1},
        {"logprob_profile": {"member_mean": -3.0}},
        {"logprob_profile": {"member_std": 0.0}},
    ],
)
def test_config_rejects_out_of_range_settings(settings):
    with pytest.raises(ConfigError):
        MockConfig(**settings)


def test_config_digest_ignores_delay_only():
    base = MockConfig(seed=3)
    assert MockConfig(seed=3, max_delay_ms=40).endpoint_id == base.endpoint_id
    assert MockConfig(seed=4).endpoint_id != base.endpoint_id
    assert base.endpoint_id.startswith("mock-")


def test_for_condition_memorizes_the_contamination_subset():
    config = MockConfig(seed=7).for_condition(ITEMS, 10)
    assert config.contamination_p == 10
    assert len(config.memorized_ids) == 20
    assert config.memorized_ids <= IDS
    assert MockConfig(seed=7).for_condition(ITEMS, 50).memorized_ids >= config.memorized_ids


# === ANSWERING ===
def test_full_index_memory_returns_original_gold_letter():
    mock = model(memorized_ids=IDS, index_memory_strength=1.0)
    for item in ITEMS[:50]:
        view = permute_choices(item, run_seed=1)
        assert letter_of(mock.answer(view.prompt)) == item.gold_index


def test_perfect_reasoner_tracks_the_displayed_gold():
    mock = model(base_accuracy=1.0)
    for item in ITEMS[:50]:
        view = permute_choices(item, run_seed=2)
        assert letter_of(mock.answer(view.prompt)) == view.displayed_gold_index


def test_cross_lingual_invariance_fixes_the_letter_across_orders():
    mock = model(memorized_ids=IDS, crosslingual_invariance=1.0)
    for item in ITEMS[:30]:
        letters = {letter_of(mock.answer(permute_choices(item, run_seed=s).prompt)) for s in range(5)}
        assert len(letters) == 1


def test_collapse_answers_one_letter_for_everything():
    mock = model(collapse=True, crosslingual_invariance=1.0)
    letters = {letter_of(mock.answer(permute_choices(item, run_seed=3).prompt)) for item in ITEMS[:50]}
    assert len(letters) == 1


def test_unmemorized_items_ignore_index_memory():
    mock = model(index_memory_strength=1.0)
    hits = sum(
        letter_of(mock.answer(permute_choices(item, run_seed=4).prompt)) == item.gold_index for item in ITEMS
    )
    assert hits < 100


def test_answers_are_deterministic():
    first = model(seed=5)
    second = model(seed=5)
    for item in ITEMS[:20]:
        prompt = permute_choices(item, run_seed=5).prompt
        assert first.answer(prompt) == second.answer(prompt)


def test_masked_option_fill():
    item = ITEMS[0]
    view = mask_choice(permute_choices(item, run_seed=6), run_seed=6)

    remembering = model(memorized_ids={item.id}, surface_memory=True)
    assert remembering.answer(view.prompt).splitlines()[1] == f"Option: {view.reference}"

    forgetting = model(memorized_ids={item.id})
    assert forgetting.answer(view.prompt).splitlines()[1] == "Option: zzzq"
    assert model(surface_memory=True).answer(view.prompt).endswith("zzzq")


def test_masked_question_word():
    items = make_qa_items(5)
    view = mask_question_token(items[2])
    assert view.reference == "station"

    assert model(items, memorized_ids={items[2].id}, surface_memory=True).answer(view.prompt) == "station"
    assert model(items, surface_memory=True).answer(view.prompt) == "zzzq"


def test_unknown_prompts():
    mock = model()
    with pytest.raises(MockPromptError):
        mock.answer("Question: never seen\nA. x\nB. y")
    with pytest.raises(MockPromptError):
        mock.answer("What is love?")
    with pytest.raises(MockPromptError):
        mock.answer("Context: nothing\nQuestion: no mask here")


# === SCORING ===
def test_scores_are_deterministic_and_capped():
    mock = model(memorized_ids={ITEMS[0].id})
    text = scored_text(ITEMS[0])
    tokens = mock.score(text)
    assert tokens == model(memorized_ids={ITEMS[0].id}).score(text)
    assert [t["token"] for t in tokens] == text.split()
    assert all(t["logprob"] <= -1e-6 for t in tokens)


def test_unknown_text_scores_as_nonmember_and_is_counted():
    mock = model(memorized_ids=IDS)
    mock.score("text nobody registered")
    mock.score("text nobody registered")
    assert len(mock.unknown_digests) == 1
    mock.score(scored_text(ITEMS[0]))
    assert len(mock.unknown_digests) == 1


def test_moments_follow_the_nonmember_profile():
    tokens = model(supports_moments=True).score(scored_text(ITEMS[1]))
    assert {(t["dist_mean"], t["dist_std"]) for t in tokens} == {(-2.5, 0.8)}
    assert "dist_mean" not in model(supports_moments=False).score(scored_text(ITEMS[1]))[0]


def test_member_logprobs_sit_above_nonmember_logprobs():
    mock = model(memorized_ids=frozenset(item.id for item in ITEMS[:100]))
    members = [t["logprob"] for item in ITEMS[:100] for t in mock.score(scored_text(item))]
    nonmembers = [t["logprob"] for item in ITEMS[100:] for t in mock.score(scored_text(item))]
    assert mannwhitneyu(members, nonmembers, alternative="greater").pvalue < 1e-6


# === SERVER ===
def post(server, **body):
    return requests.post(f"{server.url}/v1/complete", json=body, timeout=10)


def test_server_logs_each_request(mock_server):
    server = mock_server(MockConfig(), ITEMS)
    response = post(server, prompt=permute_choices(ITEMS[0], run_seed=0).prompt)
    assert response.status_code == 200
    assert response.json()["text"].startswith("Answer: ")
    assert len(server.request_log) == 1
    assert server.request_log[0]["echo"] is False


def test_server_stats_route(mock_server):
    server = mock_server(MockConfig(), ITEMS)
    post(server, prompt=permute_choices(ITEMS[0], run_seed=0).prompt)
    stats = requests.get(f"{server.url}/debug/stats", timeout=10).json()
    assert stats["requests"] == 1
    assert stats["endpoint_id"] == server.model.endpoint_id
    assert requests.get(f"{server.url}/nowhere", timeout=10).status_code == 404


def test_server_rejects_bad_requests(mock_server):
    server = mock_server(MockConfig(supports_scoring=False), ITEMS)
    assert requests.post(f"{server.url}/v1/complete", data=b"{", timeout=10).status_code == 400
    assert post(server, prompt="unknown").status_code == 400
    assert post(server, prompt=scored_text(ITEMS[0]), echo=True, logprobs=True).status_code == 501


def test_server_echo_scoring(mock_server):
    server = mock_server(MockConfig(), ITEMS)
    payload = post(server, prompt=scored_text(ITEMS[3]), echo=True, logprobs=True, max_tokens=0).json()
    assert payload["text"] == ""
    assert len(payload["tokens"]) == len(scored_text(ITEMS[3]).split())


def test_server_concurrency_is_observed(mock_server):
    server = mock_server(MockConfig(max_delay_ms=20), ITEMS)
    prompts = [permute_choices(item, run_seed=0).prompt for item in ITEMS[:50]]
    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        statuses = list(pool.map(lambda prompt: post(server, prompt=prompt).status_code, prompts))
    assert statuses == [200] * 50
    assert 1 <= server.max_concurrent <= 8
    assert server.request_count == 50


def test_restarted_server_answers_identically(mock_server):
    config = MockConfig(seed=9, base_accuracy=0.5).for_condition(ITEMS, 50)
    prompts = [permute_choices(item, run_seed=9).prompt for item in ITEMS[:40]]

    first = mock_server(config, ITEMS)
    before = [post(first, prompt=prompt).json()["text"] for prompt in prompts]
    first.stop()

    second = mock_server(config, ITEMS)
    after = [post(second, prompt=prompt).json()["text"] for prompt in reversed(prompts)]
    assert before == list(reversed(after))
