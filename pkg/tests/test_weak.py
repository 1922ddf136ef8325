import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from querytagger.corpus import GenConfig, LabelScheme, QueryExample, generate_synthetic_corpus
from querytagger.weak import (DemonstrationPool, LabelerError, MockLabeler, ParseFailure,
                              PromptCache, PromptStrategy, RemoteLabeler, build_prompt,
                              evaluate_prompt_strategy, fixed_demonstrations, format_response,
                              generate_weak_labels, hashed_embedder, parse_labels, read_prompt,
                              retrieve_demonstrations)

SCHEME = LabelScheme()


@pytest.fixture(scope="module")
def pool(small_corpus):
    return DemonstrationPool.build(small_corpus.strong, hashed_embedder(16))


# ---------------------------------------------------------------- parsing

def test_parse_round_trip_on_gold(small_corpus):
    gold = small_corpus.strong + small_corpus.test
    for ex in gold:
        assert parse_labels(format_response(ex.query, ex.tags, SCHEME), ex.query, SCHEME) == ex.tags


def test_parse_is_lenient_on_case_and_blank_lines():
    tags = parse_labels("Nike -> brand\n\nshoes ->   Product\n", ["nike", "shoes"], SCHEME)
    assert tags == ["B-Brand", "B-Product"]
    assert parse_labels("a -> Brand\nb -> Brand", ["a", "b"], SCHEME) == ["B-Brand", "I-Brand"]


@pytest.mark.parametrize("response, reason", [
    ("", "empty"),
    ("nike -> Brand", "1 answer lines"),
    ("nike: Brand\nshoes -> Product", "not 'token -> Category'"),
    ("adidas -> Brand\nshoes -> Product", "expected 'nike'"),
    ("nike -> Color\nshoes -> Product", "unknown category"),
])
def test_parse_failures(response, reason):
    with pytest.raises(ParseFailure, match=reason):
        parse_labels(response, ["nike", "shoes"], SCHEME)


# --------------------------------------------------------------- retrieval

def test_retrieval_matches_full_sort(pool, small_corpus):
    embed = hashed_embedder(16)
    for ex in small_corpus.test[:20]:
        q = embed(ex.query)
        sims = [float(v @ (q / np.linalg.norm(q))) for v in pool.vectors]
        top = sorted(range(len(pool)), key=lambda i: (-sims[i], i))[:3]
        bottom = sorted(range(len(pool)), key=lambda i: (sims[i], i))[:3]
        ids = {id(e): i for i, e in enumerate(pool.examples)}
        got = [ids[id(e)] for e in retrieve_demonstrations(q, pool, 3, "+-")]
        assert got == top + bottom
        got = [ids[id(e)] for e in retrieve_demonstrations(q, pool, 3, "-+")]
        assert got == bottom + top


def test_retrieval_breaks_ties_by_index():
    exs = [QueryExample(["a"], tags=["O"], quality="strong", source="human")] * 4
    pool = DemonstrationPool(exs, np.array([[1.0, 0.0]] * 4))
    picked = retrieve_demonstrations(np.array([1.0, 0.0]), pool, 2)
    assert picked == exs[:2]
    with pytest.raises(ValueError):
        retrieve_demonstrations(np.array([1.0, 0.0]), pool, 3, "+-")


def test_fixed_demonstrations_cover_categories(pool):
    demos = fixed_demonstrations(pool, 3, SCHEME)
    covered = {t[2:] for ex in demos for t in ex.tags if t != "O"}
    assert covered == set(SCHEME.categories)
    assert fixed_demonstrations(pool, 3, SCHEME) == demos


# ----------------------------------------------------------------- prompts

def test_prompt_layouts_round_trip(pool, small_corpus):
    ex = small_corpus.test[0]
    embed = hashed_embedder(16)
    for kind in ("prompting", "demonstration", "dynamic", "cot"):
        strategy = PromptStrategy(kind, demo_count=2)
        prompt = build_prompt(strategy, ex, SCHEME, pool, embed)
        assert prompt == build_prompt(strategy, ex, SCHEME, pool, embed)
        parsed = read_prompt(prompt)
        assert parsed.query == ex.query
        assert len(parsed.demos) == (0 if kind == "prompting" else 2)
        assert parsed.titles == (ex.titles[:3] if kind == "cot" else [])


def test_strategy_validation(small_corpus, pool):
    with pytest.raises(ValueError):
        PromptStrategy("few-shot-ish")
    with pytest.raises(ValueError):
        PromptStrategy("dynamic", polarity="0")
    with pytest.raises(ValueError):
        PromptStrategy("demonstration", demo_count=0)
    assert PromptStrategy("chain_of_thoughts").kind == "cot"
    assert PromptStrategy("dynamic", polarity="-+").name == "dynamic(-+)"
    untitled = QueryExample(["nike"], [], ["B-Brand"], "strong", "human")
    with pytest.raises(ValueError, match="titles"):
        build_prompt(PromptStrategy("cot"), untitled, SCHEME, pool)
    with pytest.raises(ValueError):
        build_prompt(PromptStrategy("dynamic"), small_corpus.test[0], SCHEME, pool)


# ------------------------------------------------------------- generation

def test_cache_makes_warm_runs_free(tmp_path, small_corpus):
    data = small_corpus.test[:30]
    path = tmp_path / "cache.jsonl"
    client = MockLabeler(small_corpus.lexicon, SCHEME)
    strategy = PromptStrategy("prompting")
    cold, s1 = generate_weak_labels(data, strategy, client, SCHEME, cache=PromptCache(path))
    assert s1.client_calls == 30 and s1.cache_hits == 0
    warm, s2 = generate_weak_labels(data, strategy, client, SCHEME, cache=PromptCache(path))
    assert s2.client_calls == 0 and s2.cache_hits == 30
    assert warm == cold
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 30
    assert set(records[0]) == {"prompt_hash", "prompt", "response", "timestamp"}


def test_labels_are_weak_llm_and_keep_order(small_corpus):
    data = small_corpus.test[:20]
    out, stats = generate_weak_labels(data, PromptStrategy("prompting"),
                                      MockLabeler.perfect(small_corpus.lexicon, SCHEME), SCHEME)
    assert stats.labeled == 20
    assert [e.query for e in out] == [e.query for e in data]
    assert all(e.quality == "weak" and e.source == "llm" for e in out)


def test_malformed_responses_are_rejected_at_their_rate(small_corpus):
    data = small_corpus.unlabeled[:300]
    client = MockLabeler(small_corpus.lexicon, SCHEME, malformed_rate=0.1)
    out, stats = generate_weak_labels(data, PromptStrategy("prompting"), client, SCHEME)
    assert 0.06 < stats.rejection_rate < 0.14
    assert stats.parse_failures == stats.rejected == 300 - len(out)


def test_label_noise_lowers_brand_f1(small_corpus, pool):
    scores = []
    for noise in (0.0, 0.2, 0.5):
        client = MockLabeler(small_corpus.lexicon, SCHEME, flip_noise=noise)
        rep, _ = evaluate_prompt_strategy(PromptStrategy("cot"), small_corpus.test, client,
                                          SCHEME, pool)
        scores.append(rep.category_f1("Brand"))
    assert scores[0] > scores[1] > scores[2]


class Flaky:
    def __init__(self, inner, failures):
        self.inner, self.failures, self.calls = inner, failures, 0

    def complete(self, prompt):
        self.calls += 1
        if self.calls <= self.failures:
            raise LabelerError("service unavailable")
        return self.inner.complete(prompt)


def test_retries_back_off_exponentially(small_corpus):
    sleeps = []
    client = Flaky(MockLabeler(small_corpus.lexicon, SCHEME), failures=2)
    out, stats = generate_weak_labels(small_corpus.test[:1], PromptStrategy("prompting"),
                                      client, SCHEME, workers=1, sleep=sleeps.append)
    assert len(out) == 1 and stats.retries == 2 and stats.client_calls == 3
    assert sleeps == [0.5, 1.0]


def test_permanent_failure_is_counted(small_corpus):
    client = Flaky(None, failures=10**6)
    out, stats = generate_weak_labels(small_corpus.test[:3], PromptStrategy("prompting"),
                                      client, SCHEME, workers=1, max_retries=1,
                                      sleep=lambda s: None)
    assert out == [] and stats.client_failures == 3 and stats.rejection_rate == 1.0


def test_cot_beats_demonstrations_beats_plain_prompting():
    corpus = generate_synthetic_corpus(GenConfig(seed=3, n_unlabeled=1, n_weak=1, n_strong=100,
                                                 n_test=400))
    pool = DemonstrationPool.build(corpus.strong, hashed_embedder(16))
    client = MockLabeler(corpus.lexicon, SCHEME)
    brand = {}
    for kind in ("prompting", "demonstration", "cot"):
        rep, _ = evaluate_prompt_strategy(PromptStrategy(kind), corpus.test, client, SCHEME, pool)
        brand[kind] = rep.category_f1("Brand")
    assert brand["cot"] > brand["demonstration"] > brand["prompting"]


def test_evaluation_needs_gold(small_corpus):
    with pytest.raises(ValueError):
        evaluate_prompt_strategy(PromptStrategy(), small_corpus.unlabeled[:2],
                                 MockLabeler(small_corpus.lexicon, SCHEME), SCHEME)


# ------------------------------------------------------------------ remote

def test_remote_without_endpoint(monkeypatch):
    monkeypatch.delenv("LABELER_ENDPOINT", raising=False)
    with pytest.raises(LabelerError):
        RemoteLabeler()


@pytest.fixture
def stub_server():
    seen = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((body, self.headers.get("Authorization")))
            reply = json.dumps({"choices": [{"message": {"content": "nike -> Brand"}}]})
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(reply.encode())

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/complete", seen
    server.shutdown()


def test_remote_labeler_talks_json(stub_server):
    url, seen = stub_server
    client = RemoteLabeler(url, model="m", token="t0k")
    assert client.complete("label: nike") == "nike -> Brand"
    body, auth = seen[0]
    assert body["prompt"] == "label: nike" and body["temperature"] == 0 and auth == "Bearer t0k"


def test_remote_labeler_connection_error():
    with pytest.raises(LabelerError):
        RemoteLabeler("http://127.0.0.1:9/none", timeout=2).complete("x")
