import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from prism.backends import (
    BackendUnavailableError,
    ContextOverflowError,
    HttpBackend,
    PromptPlan,
    Segment,
    ShapeMismatchError,
    SurrogateBackend,
    load_scripted,
)
from prism.backends.base import select_attention_layers
from tests.conftest import FIXTURES
from tests.oracles import surrogate_signals_ref


def plan_from_texts(step_texts, system="header text"):
    segments = [Segment(kind="system", text=system)]
    segments += [
        Segment(kind="step_text", text=text, step_index=i)
        for i, text in enumerate(step_texts)
    ]
    return PromptPlan(segments=tuple(segments))


class TestTokenServices:
    def test_empty_string_counts_zero(self):
        assert SurrogateBackend().count_tokens("") == 0

    def test_simple_count(self):
        assert SurrogateBackend().count_tokens("a b c") == 3

    def test_whitespace_collapse(self):
        assert SurrogateBackend().count_tokens("  a   b ") == 2

    def test_concat_subadditivity(self):
        backend = SurrogateBackend()
        for a, b in [("x y", "z w"), ("", "k"), ("a ", " b"), ("one", "two")]:
            assert backend.count_tokens(a + b) <= (
                backend.count_tokens(a) + backend.count_tokens(b) + 1
            )

    def test_truncate_under_budget(self):
        result = SurrogateBackend().truncate_to_budget("alpha beta", 5)
        assert (result.prefix, result.truncated) == ("alpha beta", False)

    def test_truncate_cuts_at_token_boundary(self):
        result = SurrogateBackend().truncate_to_budget("a b c d e f", 4)
        assert (result.prefix, result.truncated) == ("a b c d", True)

    def test_truncate_exact_fit(self):
        result = SurrogateBackend().truncate_to_budget("word", 1)
        assert (result.prefix, result.truncated) == ("word", False)

    def test_truncated_prefix_is_a_prefix(self):
        backend = SurrogateBackend()
        text = "alpha  beta\tgamma\ndelta epsilon"
        for budget in range(1, 7):
            result = backend.truncate_to_budget(text, budget)
            assert text.startswith(result.prefix)
            assert backend.count_tokens(result.prefix) <= budget


class TestSurrogate:
    def test_matches_independent_reimplementation(self):
        plan = plan_from_texts(
            [
                "Step 1 [A/action]:\nsearch the web for answers",
                "Step 2 [B/tool]:\nError: request timed out after retries",
                "Step 3 [A/action]:\ngive up and report failure",
            ],
            system="prefix context words here",
        )
        signals = SurrogateBackend().prefill(plan, layer_fraction=0.2)
        nll_ref, attn_ref, counts_ref, total_ref = surrogate_signals_ref(plan)
        assert signals.prompt_token_total == total_ref
        assert list(signals.token_counts) == counts_ref
        np.testing.assert_allclose(signals.step_nll, nll_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(signals.step_attention, attn_ref, rtol=0, atol=1e-12)

    def test_deterministic_across_runs(self):
        plan = plan_from_texts(["a b c", "d e f g", "h"])
        first = SurrogateBackend().prefill(plan, 0.2)
        second = SurrogateBackend().prefill(plan, 0.2)
        assert first.step_nll.tobytes() == second.step_nll.tobytes()
        assert first.step_attention.tobytes() == second.step_attention.tobytes()

    def test_structural_invariants(self):
        plan = plan_from_texts(["alpha beta", "gamma delta error", "omega"])
        signals = SurrogateBackend().prefill(plan, 0.2)
        n = signals.n_steps
        assert (signals.step_nll >= 0).all() and np.isfinite(signals.step_nll).all()
        assert (signals.step_attention >= 0).all()
        upper = np.triu(signals.step_attention)
        assert not upper.any(), "attention must be strictly lower-triangular"
        assert (signals.token_counts >= 1).all()
        assert signals.step_attention.shape == (n, n)

    def test_prepending_segment_keeps_token_membership(self):
        base = plan_from_texts(["a b", "c d e"])
        extended = PromptPlan(
            segments=(Segment(kind="system", text="extra words in front"),)
            + base.segments
        )
        backend = SurrogateBackend()
        sig_base = backend.prefill(base, 0.2)
        sig_ext = backend.prefill(extended, 0.2)
        assert list(sig_base.token_counts) == list(sig_ext.token_counts)
        assert sig_ext.prompt_token_total == sig_base.prompt_token_total + 4

    def test_context_overflow(self):
        backend = SurrogateBackend(context_limit=3)
        with pytest.raises(ContextOverflowError) as err:
            backend.prefill(plan_from_texts(["a b c d e"]), 0.2)
        assert err.value.required > err.value.available == 3

    def test_capabilities(self):
        caps = SurrogateBackend(context_limit=100).capabilities(0.2)
        assert caps.context_limit == 100
        assert caps.layer_count == 1
        assert caps.attention_layer_indices == (0,)


class TestLayerSelection:
    def test_last_fraction(self):
        assert select_attention_layers(28, 0.2) == tuple(range(22, 28))
        assert select_attention_layers(10, 0.2) == (8, 9)
        assert select_attention_layers(1, 0.2) == (0,)
        assert select_attention_layers(4, 1.0) == (0, 1, 2, 3)


class TestScripted:
    def test_step_form_pass_through(self):
        backend = load_scripted(
            {"steps": 3, "step_nll": [1, 2, 3], "step_attention": [[], [0.0], [0.0, 0.0]]}
        )
        signals = backend.prefill(plan_from_texts(["a", "b", "c"]), 0.2)
        assert list(signals.step_nll) == [1.0, 2.0, 3.0]
        assert not signals.step_attention.any()

    def test_token_form_aggregates_like_oracle(self):
        backend = load_scripted(str(FIXTURES / "scripted" / "token_two_step.json"))
        signals = backend.prefill(plan_from_texts(["a b", "c"]), 0.2)
        # hand-computed from the 3x3 matrix: A[1][0] = 0.25 + 0.35
        assert signals.step_attention[1, 0] == pytest.approx(0.6, abs=1e-12)
        assert list(signals.step_nll) == [2.0, 2.0]
        assert list(signals.token_counts) == [2, 1]
        assert signals.prompt_token_total == 3

    def test_single_token_steps_pass_attention_through(self):
        backend = load_scripted(
            {
                "tokens": [
                    {"text": "x", "nll": 1.0, "step": 0},
                    {"text": "y", "nll": 1.0, "step": 1},
                ],
                "attention": [[1.0, 0.0], [0.4, 0.6]],
            }
        )
        signals = backend.prefill(plan_from_texts(["x", "y"]), 0.2)
        assert signals.step_attention[1, 0] == pytest.approx(0.4, abs=1e-15)

    def test_doubling_token_weights_doubles_step_attention(self):
        base = {
            "tokens": [
                {"text": "a", "nll": 1.0, "step": 0},
                {"text": "b", "nll": 1.0, "step": 0},
                {"text": "c", "nll": 1.0, "step": 1},
            ],
            "attention": [[1.0, 0, 0], [0.3, 0.7, 0], [0.2, 0.3, 0.5]],
        }
        doubled = json.loads(json.dumps(base))
        doubled["attention"][2][0] *= 2
        doubled["attention"][2][1] *= 2
        plan = plan_from_texts(["a b", "c"])
        one = load_scripted(base).prefill(plan, 0.2)
        two = load_scripted(doubled).prefill(plan, 0.2)
        assert two.step_attention[1, 0] == pytest.approx(2 * one.step_attention[1, 0])

    def test_shape_mismatch(self):
        backend = load_scripted(
            {"steps": 3, "step_nll": [1, 2, 3], "step_attention": [[], [0.0], [0.0, 0.0]]}
        )
        with pytest.raises(ShapeMismatchError):
            backend.prefill(plan_from_texts(["a", "b", "c", "d"]), 0.2)

    def test_rejects_upper_triangular_entries(self):
        with pytest.raises(ValueError):
            load_scripted(
                {"steps": 2, "step_nll": [1, 1], "step_attention": [[0, 0.5], [0.1, 0]]}
            )

    def test_rejects_negative_nll(self):
        with pytest.raises(ValueError):
            load_scripted(
                {"steps": 1, "step_nll": [-1.0], "step_attention": [[]]}
            )

    def test_fixture_cases_file(self):
        backend = load_scripted(str(FIXTURES / "scripted" / "eval_cases.json"))
        for n in (3, 4, 5, 6):
            signals = backend.prefill(plan_from_texts(["x"] * n), 0.2)
            assert signals.n_steps == n
            upper = np.triu(signals.step_attention)
            assert not upper.any()
            assert (signals.step_nll >= 0).all()


class _ScriptedHandler(BaseHTTPRequestHandler):
    responses = []
    requests = []

    def log_message(self, *args):
        pass

    def _serve(self):
        status, body = self.responses.pop(0)
        payload = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        type(self).requests.append(("GET", self.path, None))
        self._serve()

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else None
        type(self).requests.append(("POST", self.path, body))
        self._serve()


@pytest.fixture
def http_server():
    class Handler(_ScriptedHandler):
        responses = []
        requests = []

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", Handler
    server.shutdown()


GOOD_PREFILL = {
    "step_nll": [1.0, 2.0],
    "step_attention": [[0.0, 0.0], [0.5, 0.0]],
    "token_counts": [3, 2],
    "prompt_token_total": 9,
    "model_id": "tiny-test",
    "layer_indices_used": [3],
}

MODEL_INFO = {"model_id": "tiny-test", "context_limit": 4096, "layer_count": 4, "head_count": 2}


class TestHttpBackend:
    def test_prefill_round_trip(self, http_server):
        url, handler = http_server
        handler.responses.append((200, GOOD_PREFILL))
        backend = HttpBackend(url, sleep=lambda s: None)
        signals = backend.prefill(plan_from_texts(["a b c", "d e"]), 0.2)
        assert list(signals.step_nll) == [1.0, 2.0]
        assert signals.step_attention[1, 0] == 0.5
        assert signals.prompt_token_total == 9
        method, path, body = handler.requests[0]
        assert (method, path) == ("POST", "/v1/prefill")
        assert body["layer_fraction"] == 0.2
        assert [seg["kind"] for seg in body["segments"]][0] == "system"

    def test_capabilities_from_model_info(self, http_server):
        url, handler = http_server
        handler.responses.append((200, MODEL_INFO))
        caps = HttpBackend(url, sleep=lambda s: None).capabilities(0.2)
        assert caps.context_limit == 4096
        assert caps.attention_layer_indices == (3,)

    def test_retries_then_succeeds(self, http_server):
        url, handler = http_server
        handler.responses.extend([(503, {"detail": "loading"}), (200, GOOD_PREFILL)])
        sleeps = []
        backend = HttpBackend(url, sleep=sleeps.append)
        signals = backend.prefill(plan_from_texts(["a", "b"]), 0.2)
        assert signals.prompt_token_total == 9
        assert sleeps == [0.5]

    def test_unavailable_after_three_attempts(self, http_server):
        url, handler = http_server
        handler.responses.extend([(503, {})] * 3)
        sleeps = []
        backend = HttpBackend(url, sleep=sleeps.append)
        with pytest.raises(BackendUnavailableError):
            backend.prefill(plan_from_texts(["a"]), 0.2)
        assert sleeps == [0.5, 1.0]

    def test_413_maps_to_context_overflow(self, http_server):
        url, handler = http_server
        handler.responses.append(
            (413, {"detail": {"required": 900, "available": 512}})
        )
        backend = HttpBackend(url, sleep=lambda s: None)
        with pytest.raises(ContextOverflowError) as err:
            backend.prefill(plan_from_texts(["a"]), 0.2)
        assert (err.value.required, err.value.available) == (900, 512)

    def test_connection_refused_unavailable(self):
        backend = HttpBackend("http://127.0.0.1:9", timeout=0.2, sleep=lambda s: None)
        with pytest.raises(BackendUnavailableError):
            backend.prefill(plan_from_texts(["a"]), 0.2)
