import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ter_tsf.errors import BackendError, ConfigError, DataError
from ter_tsf.generator import (
    GenerationRequest,
    MockBackend,
    RemoteBackend,
    ToyBackend,
    ToyLM,
    default_toy_lm,
    derive_seed,
    generate_all,
    toy_lm_logprob,
    toy_lm_sample,
)
from ter_tsf.reward import DEFAULT_KEYWORDS, reward_relevance
from ter_tsf.textualize import assemble_prompt, describe_series, serialize_series

PROMPT = assemble_prompt(serialize_series([0.1, 0.5, 0.9]), describe_series([0.1, 0.5, 0.9]), ["rain expected"]).rendered


class TestMock:
    def test_deterministic(self):
        a = MockBackend(DEFAULT_KEYWORDS).generate(GenerationRequest(PROMPT, k=2, seed=7))
        b = MockBackend(DEFAULT_KEYWORDS).generate(GenerationRequest(PROMPT, k=2, seed=7))
        assert len(a) == 2 and a == b
        assert [c.generation_index for c in a] == [0, 1]

    def test_seed_and_prompt_change_output(self):
        m = MockBackend(DEFAULT_KEYWORDS)
        a = m.generate(GenerationRequest(PROMPT, k=4, seed=7))
        assert a != m.generate(GenerationRequest(PROMPT, k=4, seed=8))

    def test_k1(self):
        assert len(MockBackend(DEFAULT_KEYWORDS).generate(GenerationRequest(PROMPT, k=1))) == 1

    def test_keyword_dial(self):
        out = MockBackend(DEFAULT_KEYWORDS, keyword_counts=[3, 0]).generate(GenerationRequest(PROMPT, k=4))
        hits = [reward_relevance(c.body, DEFAULT_KEYWORDS) for c in out]
        assert hits == [0.6, 0.0, 0.6, 0.0]

    def test_direction_and_echo(self):
        body = MockBackend(DEFAULT_KEYWORDS, [0]).generate(GenerationRequest(PROMPT, k=1))[0].body
        assert "rising" in body and "rain expected" in body
        body = MockBackend(DEFAULT_KEYWORDS, [0], echo_text=False).generate(GenerationRequest(PROMPT, k=1))[0].body
        assert "rain" not in body

    def test_candidate_i_independent_of_k(self):
        m = MockBackend(DEFAULT_KEYWORDS)
        assert m.generate(GenerationRequest(PROMPT, k=1, seed=3))[0] == m.generate(GenerationRequest(PROMPT, k=5, seed=3))[0]


def test_request_validation():
    with pytest.raises(ConfigError):
        GenerationRequest("p", k=0)
    with pytest.raises(ConfigError):
        GenerationRequest("p", temperature=-1)


def test_derive_seed_stable():
    # sha256 based, so independent of PYTHONHASHSEED
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert 0 <= derive_seed(5, "x", 3) < 2**63


class TestToyLM:
    def test_uniform_logprob(self):
        m = ToyLM.uniform(["a", "b", "c", "d"])
        assert toy_lm_logprob(m, ["a", "b", "c"]) == pytest.approx(3 * math.log(0.25), abs=1e-12)
        assert toy_lm_logprob(m, "a b c") == pytest.approx(-4.158883, abs=1e-6)
        assert toy_lm_logprob(m, ["d"]) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_hand_built_two_token(self):
        # logits (0, ln 3) -> softmax (1/4, 3/4)
        m = ToyLM(("x", "y"), [[0.0, math.log(3)], [0.0, math.log(3)]], [0.0, 0.0])
        assert toy_lm_logprob(m, ["x", "y"]) - toy_lm_logprob(m, ["x"]) == pytest.approx(math.log(0.75), abs=1e-12)
        assert toy_lm_logprob(m, ["y", "x"]) - toy_lm_logprob(m, ["y"]) == pytest.approx(math.log(0.25), abs=1e-12)

    def test_oov(self):
        with pytest.raises(DataError):
            toy_lm_logprob(ToyLM.uniform(["a"]), ["a", "zz"])
        with pytest.raises(DataError):
            toy_lm_logprob(ToyLM.uniform(["a"]), [])

    def test_invalid_logits(self):
        with pytest.raises(ConfigError):
            ToyLM(("a", "b"), [[0, np.inf], [0, 0]], [0, 0])
        with pytest.raises(ConfigError):
            ToyLM(("a", "b"), [[0, 0]], [0, 0])

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=1, max_size=8), st.floats(0.01, 2.0))
    def test_logprob_nonpositive_and_monotone(self, seed, ids, bump):
        rng = np.random.default_rng(seed)
        vocab = tuple("abcde")
        m = ToyLM(vocab, rng.normal(size=(5, 5)), rng.normal(size=5))
        toks = [vocab[i] for i in ids]
        lp = toy_lm_logprob(m, toks)
        assert lp <= 0
        big, start = m.bigram_logits.copy(), m.start_logits.copy()
        start[ids[0]] += bump
        for a, b in set(zip(ids[:-1], ids[1:])):
            big[a, b] += bump
        assert toy_lm_logprob(m.with_logits(big, start), toks) > lp

    def test_sample_deterministic(self):
        m = ToyLM(tuple("abc"), np.random.default_rng(0).normal(size=(3, 3)), [0, 1, 2])
        assert toy_lm_sample(m, 20, seed=5) == toy_lm_sample(m, 20, seed=5)
        assert len(toy_lm_sample(m, 20, seed=5)) == 20

    def test_sample_degenerate(self):
        big = np.full((3, 3), -50.0)
        big[:, 2] = 50.0
        m = ToyLM(tuple("abc"), big, [-50, -50, 50])
        assert toy_lm_sample(m, 10, seed=0) == ["c"] * 10

    def test_sample_frequencies_match_softmax(self):
        start = np.array([0.0, math.log(3), math.log(6)])  # probs 0.1, 0.3, 0.6
        big = np.array([[0.0, 0.0, math.log(2)], [math.log(4), 0.0, 0.0], [0.0, 0.0, 0.0]])
        m = ToyLM(tuple("abc"), big, start)
        n = 10_000
        draws = [toy_lm_sample(m, 2, seed=s) for s in range(n)]
        first = np.array([sum(d[0] == t for d in draws) for t in "abc"]) / n
        np.testing.assert_allclose(first, [0.1, 0.3, 0.6], atol=0.02)
        after_c = [d[1] for d in draws if d[0] == "c"]
        freq = np.array([after_c.count(t) for t in "abc"]) / len(after_c)
        np.testing.assert_allclose(freq, [1 / 3] * 3, atol=0.02)

    def test_greedy(self):
        m = ToyLM(tuple("ab"), [[0, 1], [1, 0]], [1, 0])
        assert toy_lm_sample(m, 4, seed=0, temperature=0) == ["a", "b", "a", "b"]

    def test_backend_and_round_trip(self):
        m = default_toy_lm(DEFAULT_KEYWORDS)
        assert set(DEFAULT_KEYWORDS) <= set(m.vocabulary)
        out = ToyBackend(m).generate(GenerationRequest("p", k=3, max_tokens=6, seed=1))
        assert len(out) == 3 and all(len(c.body.split()) == 6 for c in out)
        assert out == ToyBackend(m).generate(GenerationRequest("p", k=3, max_tokens=6, seed=1))
        again = ToyLM.from_dict(json.loads(json.dumps(m.to_dict())))
        assert again.vocabulary == m.vocabulary
        np.testing.assert_array_equal(again.bigram_logits, m.bigram_logits)


# --------------------------------------------------------------------------
# remote backend against a local HTTP server


class _Handler(BaseHTTPRequestHandler):
    response = {"candidates": ["one", "two"]}
    status = 200
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        payload = json.dumps(self.response).encode()
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    handler = type("H", (_Handler,), {"seen": [], "response": {"candidates": ["one", "two"]}, "status": 200})
    httpd = HTTPServer(("127.0.0.1", 0), handler)
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    yield handler, f"http://127.0.0.1:{httpd.server_port}/generate"
    httpd.shutdown()


class TestRemote:
    def test_success_and_payload(self, server):
        handler, url = server
        out = RemoteBackend(url, token="sekrit").generate(GenerationRequest("hello", k=2, temperature=0.7, max_tokens=9, seed=4))
        assert [c.body for c in out] == ["one", "two"]
        assert [c.generation_index for c in out] == [0, 1]
        body, auth = handler.seen[0]
        assert body == {"prompt": "hello", "n": 2, "temperature": 0.7, "max_tokens": 9, "seed": 4}
        assert auth == "Bearer sekrit"

    def test_env_configuration(self, server, monkeypatch):
        handler, url = server
        monkeypatch.setenv("TER_GEN_ENDPOINT", url)
        monkeypatch.setenv("TER_GEN_TOKEN", "envtok")
        RemoteBackend().generate(GenerationRequest("x", k=2))
        assert handler.seen[0][1] == "Bearer envtok"

    def test_missing_endpoint(self, monkeypatch):
        monkeypatch.delenv("TER_GEN_ENDPOINT", raising=False)
        with pytest.raises(ConfigError):
            RemoteBackend()

    def test_wrong_count_is_malformed(self, server):
        handler, url = server
        with pytest.raises(BackendError, match="malformed"):
            RemoteBackend(url).generate(GenerationRequest("x", k=3))

    def test_missing_field_is_malformed(self, server):
        handler, url = server
        handler.response = {"texts": ["a"]}
        with pytest.raises(BackendError, match="malformed"):
            RemoteBackend(url).generate(GenerationRequest("x", k=1))
        assert len(handler.seen) == 1  # malformed responses are not retried

    def test_server_errors_retried(self, server):
        handler, url = server
        handler.status = 503
        sleeps = []
        with pytest.raises(BackendError) as ei:
            RemoteBackend(url, sleep=sleeps.append).generate(GenerationRequest("x", k=2))
        assert ei.value.attempts == 3
        assert len(handler.seen) == 3
        assert sleeps == [0.5, 1.0]

    def test_unreachable(self):
        sleeps = []
        backend = RemoteBackend("http://127.0.0.1:9/none", sleep=sleeps.append, timeout=2)
        with pytest.raises(BackendError, match="after 3 attempts") as ei:
            backend.generate(GenerationRequest("x", k=2))
        assert ei.value.attempts == 3
        assert sleeps == [0.5, 1.0]

    def test_generate_all_in_flight(self, server):
        handler, url = server
        reqs = [GenerationRequest(f"p{i}", k=2) for i in range(6)]
        out = generate_all(RemoteBackend(url), reqs, workers=3)
        assert len(out) == 6 and all(len(c) == 2 for c in out)
        assert sorted(b["prompt"] for b, _ in handler.seen) == sorted(r.prompt for r in reqs)
