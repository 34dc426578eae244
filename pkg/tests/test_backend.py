import base64
import json

import httpx
import pytest

from foodtaxo.backend import (
    BackendRequest,
    DecodeParams,
    HttpConfig,
    MockScript,
    NoiseConfig,
    load_mock_script,
    make_http_backend,
    make_mock_backend,
)
from foodtaxo.backend.mock import near_miss, read_prompt
from foodtaxo.engine import Mode, build_prompt
from foodtaxo.errors import BackendRefusal, ConfigError, FormatError, ParseFailure, TransportError
from foodtaxo.ontology import StageId, candidates
from foodtaxo.textnorm import parse_strict_json


def stage_prompt(taxonomy, stage=StageId.CATEGORY, decided=None, mode=Mode.BASE):
    decided = decided or {}
    return build_prompt(stage, decided, candidates(taxonomy, stage, decided), mode)


class TestMock:
    def test_rule_returned_verbatim(self, taxonomy, image):
        backend = make_mock_backend(MockScript(rules={("category", 0): '{"category": "Protein Sources"}'}))
        resp = backend.query(BackendRequest(image, stage_prompt(taxonomy)))
        assert resp.text == '{"category": "Protein Sources"}'
        assert resp.latency >= 0
        assert backend.calls[0].stage == "category" and backend.calls[0].attempt == 0

    def test_numeric_rule_keys(self, fixtures_dir):
        script = load_mock_script((fixtures_dir / "mock_clean.yaml").read_bytes())
        assert script.rules[("subcategory", 0)] == '{"subcategory": "Burger"}'
        assert script.rules[("oneshot", 0)].startswith('{"category"')
        assert load_mock_script(b'rules: {"2:1": x}').rules == {("subcategory", 1): "x"}
        with pytest.raises(FormatError):
            load_mock_script(b'rules: {"nonsense": x}')
        with pytest.raises(FormatError):
            load_mock_script(b"noise: {p_malformed: 2}")

    def test_echo_first_candidate(self, taxonomy, image):
        backend = make_mock_backend(MockScript())
        resp = backend.query(BackendRequest(image, stage_prompt(taxonomy)))
        assert json.loads(resp.text) == {"category": "Protein Sources"}
        ctx = {StageId.CATEGORY: "Grains"}
        resp = backend.query(BackendRequest(image, stage_prompt(taxonomy, StageId.SUBCATEGORY, ctx)))
        assert json.loads(resp.text) == {"subcategory": "Bread"}

    def test_truth_followed(self, taxonomy, image):
        truth = {"category": "Vegetables", "subcategory": "Potatoes", "cooking_style": "Fried"}
        backend = make_mock_backend(MockScript(truth=truth))
        resp = backend.query(BackendRequest(image, stage_prompt(taxonomy)))
        assert json.loads(resp.text) == {"category": "Vegetables"}

    def test_malformed_with_probability_one(self, taxonomy, image):
        backend = make_mock_backend(MockScript(noise=NoiseConfig(p_malformed=1.0), seed=3))
        for _ in range(20):
            text = backend.query(BackendRequest(image, stage_prompt(taxonomy))).text
            with pytest.raises(ParseFailure):
                parse_strict_json(text, "category")

    def test_offtaxonomy_probability_one(self, taxonomy, image):
        backend = make_mock_backend(MockScript(noise=NoiseConfig(p_offtaxonomy=1.0), seed=3))
        names = {lab.canonical for lab in taxonomy.all_labels()}
        for _ in range(20):
            value = json.loads(backend.query(BackendRequest(image, stage_prompt(taxonomy))).text)["category"]
            assert value not in names

    def test_same_seed_same_log(self, taxonomy, image):
        script = MockScript(noise=NoiseConfig(0.3, 0.3, 0.3), seed=42)
        logs = []
        for _ in range(2):
            backend = make_mock_backend(script)
            for mode in (Mode.BASE, Mode.STRICT_FORMAT, Mode.CONSTRAINED_CHOICE) * 5:
                backend.query(BackendRequest(image, stage_prompt(taxonomy, mode=mode)))
            logs.append(backend.calls)
        assert logs[0] == logs[1]

    def test_attempt_index_tracks_modes(self, taxonomy, image):
        backend = make_mock_backend(MockScript())
        for mode in (Mode.BASE, Mode.STRICT_FORMAT, Mode.CONSTRAINED_CHOICE, Mode.CONSTRAINED_CHOICE, Mode.BASE):
            backend.query(BackendRequest(image, stage_prompt(taxonomy, mode=mode)))
        assert [c.attempt for c in backend.calls] == [0, 1, 2, 3, 0]
        assert [c.mode for c in backend.calls][:3] == ["Base", "StrictFormat", "ConstrainedChoice"]

    def test_scripted_errors(self, taxonomy, image):
        backend = make_mock_backend(MockScript(rules={("category", 0): "!transport", ("category", 1): "!refusal"}))
        with pytest.raises(TransportError):
            backend.query(BackendRequest(image, stage_prompt(taxonomy)))
        with pytest.raises(BackendRefusal):
            backend.query(BackendRequest(image, stage_prompt(taxonomy, mode=Mode.STRICT_FORMAT)))

    def test_read_prompt_context(self, taxonomy):
        info = read_prompt(stage_prompt(taxonomy, StageId.COOKING_STYLE, {1: "Protein Sources", 2: "Burger"}))
        assert info.stage == "cooking_style"
        assert info.context == {"category": "Protein Sources", "subcategory": "Burger"}
        assert info.candidates[:3] == ["Grilled", "Fried", "Oven Baked"]

    def test_near_miss_changes_label(self):
        import random

        rng = random.Random(0)
        outs = {near_miss("Oven Baked", rng) for _ in range(200)}
        assert "Oven Baked" not in outs
        assert "Oven-Baked" in outs


def ok_response(content="{\"category\": \"Grains\"}", **message):
    return httpx.Response(200, json={"choices": [{"message": {"content": content, **message}, "finish_reason": "stop"}]})


@pytest.fixture()
def api_key(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "secret")
    return "TEST_KEY"


class TestHttp:
    def test_wire_format(self, api_key, image):
        seen = []

        def handler(request):
            seen.append(request)
            return ok_response()

        backend = make_http_backend(
            HttpConfig("http://model.local/v1/chat/completions", "tiny-vlm", api_key, timeout=5),
            transport=httpx.MockTransport(handler),
        )
        resp = backend.query(BackendRequest(image, "Pick one", DecodeParams(max_output_chars=64)))
        assert resp.text == '{"category": "Grains"}'
        assert len(seen) == 1
        body = json.loads(seen[0].content)
        assert seen[0].headers["authorization"] == "Bearer secret"
        assert body["model"] == "tiny-vlm" and body["temperature"] == 0.0 and body["max_tokens"] == 64
        image_part, text_part = body["messages"][0]["content"]
        assert image_part["type"] == "image_url"
        assert base64.b64decode(image_part["image_url"]["url"].split(",", 1)[1]) == image.data
        assert text_part == {"type": "text", "text": "Pick one"}

    def test_transport_retries(self, api_key, image):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503) if len(calls) < 3 else ok_response()

        cfg = HttpConfig("http://model.local/v1", "m", api_key, timeout=5, transport_retries=2)
        backend = make_http_backend(cfg, transport=httpx.MockTransport(handler))
        assert backend.query(BackendRequest(image, "p")).text.startswith("{")
        assert len(calls) == 3

    def test_non_success_status(self, api_key, image):
        backend = make_http_backend(
            HttpConfig("http://model.local/v1", "m", api_key, timeout=5),
            transport=httpx.MockTransport(lambda r: httpx.Response(500, text="boom")),
        )
        with pytest.raises(TransportError):
            backend.query(BackendRequest(image, "p"))
        assert backend.requests_sent == 1

    def test_refusal(self, api_key, image):
        backend = make_http_backend(
            HttpConfig("http://model.local/v1", "m", api_key, timeout=5),
            transport=httpx.MockTransport(lambda r: ok_response(content=None, refusal="no")),
        )
        with pytest.raises(BackendRefusal):
            backend.query(BackendRequest(image, "p"))

    def test_unreachable_endpoint(self, api_key, image):
        backend = make_http_backend(HttpConfig("http://127.0.0.1:9/v1/chat/completions", "m", api_key, timeout=2))
        with pytest.raises(TransportError):
            backend.query(BackendRequest(image, "p"))

    def test_missing_credential(self, monkeypatch):
        monkeypatch.delenv("ABSENT_KEY", raising=False)
        with pytest.raises(ConfigError):
            make_http_backend(HttpConfig("http://x.local/v1", "m", "ABSENT_KEY"))

    @pytest.mark.parametrize("endpoint,timeout", [("not a url", 5), ("ftp://x.local/", 5), ("http://x.local/v1", 0)])
    def test_bad_config(self, api_key, endpoint, timeout):
        with pytest.raises(ConfigError):
            make_http_backend({"endpoint": endpoint, "model": "m", "credential_env": api_key, "timeout": timeout})
