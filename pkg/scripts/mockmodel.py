"""
Synthetic memorizing model.

Serves the modelclient wire contract. Which instances it "memorized" and how
strongly (index memory, surface memory, cross-lingual invariance, likelihood
profile) are configuration, so every contamination signal can be dialed in
and checked offline. Every draw comes from a keyed stream, so responses do
not depend on request order or concurrency.
"""

import hashlib
import json
import random
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from corpus import select_contaminated_subset
from errors import ConfigError
from logging_config import get_logger
from perturb import LETTERS, MASK, scored_text
from rng import keyed_index, keyed_rng, keyed_uniform, text_digest

logger = get_logger(__name__)

MAX_LOGPROB = -1e-6


class MockPromptError(Exception):
    """The prompt does not follow the shipped template grammar."""


@dataclass(frozen=True)
class LogprobProfile:
    member_mean: float = -0.5
    member_std: float = 0.2
    nonmember_mean: float = -2.5
    nonmember_std: float = 0.8


@dataclass
class MockConfig:
    contamination_p: int = 0
    memorized_ids: frozenset = frozenset()
    index_memory_strength: float = 0.0
    surface_memory: bool = False
    crosslingual_invariance: float = 0.0
    base_accuracy: float = 0.0
    logprob_profile: LogprobProfile = field(default_factory=LogprobProfile)
    seed: int = 0
    collapse: bool = False
    dummy_token: str = "zzzq"
    max_delay_ms: int = 0
    supports_scoring: bool = True
    supports_moments: bool = True

    def __post_init__(self):
        self.memorized_ids = frozenset(self.memorized_ids)
        if isinstance(self.logprob_profile, dict):
            self.logprob_profile = LogprobProfile(**self.logprob_profile)

        for name in ("index_memory_strength", "crosslingual_invariance", "base_accuracy"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        profile = self.logprob_profile
        if profile.member_mean <= profile.nonmember_mean:
            raise ConfigError("member_mean must be greater than nonmember_mean")
        if profile.member_std <= 0 or profile.nonmember_std <= 0:
            raise ConfigError("logprob profile stds must be positive")
        if not 0 <= self.contamination_p <= 100:
            raise ConfigError(f"contamination_p must be in [0, 100], got {self.contamination_p}")
        if self.max_delay_ms < 0:
            raise ConfigError("max_delay_ms must be >= 0")

    def to_dict(self):
        data = asdict(self)
        data["memorized_ids"] = sorted(self.memorized_ids)
        return data

    def digest(self):
        data = self.to_dict()
        # delays change timing only, never content
        data.pop("max_delay_ms")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def endpoint_id(self):
        return f"mock-{self.digest()[:12]}"

    def for_condition(self, population, p):
        """Copy of this config memorizing the contamination subset D(p) of `population`."""
        condition = select_contaminated_subset(population, p, self.seed)
        return replace(self, contamination_p=p, memorized_ids=condition.selected_ids)


class MockManifest:
    """
    Side-channel index from prompt fragments and scored-text digests back to
    the benchmark items the mock knows about.
    """

    def __init__(self, items=()):
        self.mcq_by_question = defaultdict(list)
        self.qa_by_context = defaultdict(list)
        self.scored = {}
        for item in items:
            self.add(item)

    def add(self, item):
        if item.kind == "mcq":
            self.mcq_by_question[text_digest(item.question)].append(item)
        else:
            self.qa_by_context[text_digest(item.context)].append(item)
        self.scored[text_digest(scored_text(item))] = item.id

    def __len__(self):
        return len(self.scored)


def _parse_mcq_prompt(prompt):
    lines = prompt.split("\n")
    starts = [i for i, line in enumerate(lines) if line.startswith("Question: ")]
    if not starts:
        raise MockPromptError("no 'Question:' line")
    start = starts[-1]

    # the question runs until the first lettered choice line
    choice_start = next(
        (i for i in range(start + 1, len(lines)) if lines[i].startswith("A. ")), None
    )
    if choice_start is None:
        raise MockPromptError("no lettered choices")
    question = "\n".join(lines[start : choice_start])[len("Question: ") :]

    choices = []
    for offset, line in enumerate(lines[choice_start:]):
        prefix = f"{LETTERS[offset]}. " if offset < len(LETTERS) else None
        if prefix is None or not line.startswith(prefix):
            break
        choices.append(line[len(prefix) :])
    return question, choices


def _parse_qa_prompt(prompt):
    context_at = prompt.find("Context: ")
    question_at = prompt.rfind("\nQuestion: ")
    if context_at < 0 or question_at < context_at:
        raise MockPromptError("no 'Context:' / 'Question:' pair")
    context = prompt[context_at + len("Context: ") : question_at]
    question = prompt[question_at + len("\nQuestion: ") :].rstrip("\n")
    return context, question


class MockModel:
    def __init__(self, config, manifest):
        self.config = config
        self.manifest = manifest
        self._lock = threading.Lock()
        self.unknown_digests = set()

    @property
    def endpoint_id(self):
        return self.config.endpoint_id

    def is_memorized(self, item_id):
        return item_id in self.config.memorized_ids

    # --- answering ---
    def answer(self, prompt):
        if "Context: " in prompt:
            return self._answer_qa(prompt)
        return self._answer_mcq(prompt)

    def _find_mcq(self, question, displayed):
        shown = [text for text in displayed if text != MASK]
        for item in self.manifest.mcq_by_question.get(text_digest(question), []):
            if item.k != len(displayed):
                continue
            remaining = list(item.choices)
            try:
                for text in shown:
                    remaining.remove(text)
            except ValueError:
                continue
            return item
        raise MockPromptError("question not in manifest")

    def _display_mapping(self, item, displayed):
        """mapping[i] = display slot of original choice i"""
        free = list(range(item.k))
        mapping = [None] * item.k
        masked_slot = None
        for slot, text in enumerate(displayed):
            if text == MASK:
                masked_slot = slot
                continue
            original = next(i for i in free if item.choices[i] == text)
            free.remove(original)
            mapping[original] = slot
        if masked_slot is not None:
            mapping[free[0]] = masked_slot
            return mapping, free[0]
        return mapping, None

    def choose_letter(self, item, language, displayed):
        cfg = self.config
        k = item.k
        mapping, _ = self._display_mapping(item, displayed)
        memorized = self.is_memorized(item.id)
        order = text_digest("\x1f".join(displayed))

        draw = keyed_uniform(cfg.seed, "memory", item.id)
        if memorized and draw < cfg.index_memory_strength:
            return item.gold_index
        if (memorized or cfg.collapse) and draw < cfg.crosslingual_invariance:
            if cfg.collapse:
                return keyed_index(cfg.seed, k, "collapse")
            return keyed_index(cfg.seed, k, "fixed", item.id)
        if keyed_uniform(cfg.seed, "accuracy", item.id, language, order) < cfg.base_accuracy:
            return mapping[item.gold_index]
        return keyed_index(cfg.seed, k, "guess", item.id, language, order)

    def _answer_mcq(self, prompt):
        question, displayed = _parse_mcq_prompt(prompt)
        item = self._find_mcq(question, displayed)
        letter = LETTERS[self.choose_letter(item, item.language, displayed)]

        if MASK not in displayed:
            return f"Answer: {letter}"

        _, hidden = self._display_mapping(item, displayed)
        if self.is_memorized(item.id) and self.config.surface_memory:
            fill = item.choices[hidden]
        else:
            fill = self.config.dummy_token
        return f"Answer: {letter}\nOption: {fill}"

    def _answer_qa(self, prompt):
        context, masked_question = _parse_qa_prompt(prompt)
        if MASK not in masked_question:
            raise MockPromptError("question carries no mask")
        prefix, suffix = masked_question.split(MASK, 1)

        for item in self.manifest.qa_by_context.get(text_digest(context), []):
            q = item.question
            if len(q) > len(prefix) + len(suffix) and q.startswith(prefix) and q.endswith(suffix):
                if self.is_memorized(item.id) and self.config.surface_memory:
                    return q[len(prefix) : len(q) - len(suffix)]
                return self.config.dummy_token
        raise MockPromptError("context/question not in manifest")

    # --- scoring ---
    def score(self, text):
        cfg = self.config
        profile = cfg.logprob_profile
        digest = text_digest(text)
        item_id = self.manifest.scored.get(digest)
        if item_id is None:
            with self._lock:
                self.unknown_digests.add(digest)

        if item_id is not None and self.is_memorized(item_id):
            mean, std = profile.member_mean, profile.member_std
        else:
            mean, std = profile.nonmember_mean, profile.nonmember_std

        surfaces = text.split()
        rng = keyed_rng(cfg.seed, "score", digest)
        logprobs = np.minimum(rng.normal(mean, std, len(surfaces)), MAX_LOGPROB)

        tokens = []
        for surface, logprob in zip(surfaces, logprobs):
            token = {"token": surface, "logprob": float(logprob)}
            if cfg.supports_moments:
                token["dist_mean"] = profile.nonmember_mean
                token["dist_std"] = profile.nonmember_std
            tokens.append(token)
        return tokens


# === HTTP SERVER ===
class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "MockModel/1"

    def log_message(self, format, *args):
        logger.debug("%s %s", self.address_string(), format % args)

    def _send_json(self, status, payload):
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/debug/stats":
            self._send_json(200, self.server.stats())
        else:
            self._send_json(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        server = self.server
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)

        server.enter()
        try:
            if self.path != "/v1/complete":
                self._send_json(404, {"error": f"no route {self.path}"})
                return

            fault = server.next_fault()
            if fault == "hang":
                time.sleep(server.hang_seconds)
                self._send_json(503, {"error": "injected hang"})
                return
            if fault is not None:
                self._send_json(fault, {"error": "injected fault"})
                return

            try:
                request = json.loads(raw.decode("utf-8"))
                prompt = request["prompt"]
            except (ValueError, KeyError, TypeError):
                self._send_json(400, {"error": "body must be JSON with a 'prompt'"})
                return

            server.log_request_body(request)
            server.delay()
            self._send_json(*server.handle_complete(request))
        finally:
            server.leave()


class MockServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model, host="127.0.0.1", port=0, hang_seconds=5.0):
        super().__init__((host, port), _Handler)
        self.model = model
        self.hang_seconds = hang_seconds
        self._lock = threading.Lock()
        self._faults = []
        self._in_flight = 0
        self.max_concurrent = 0
        self.request_count = 0
        self.request_log = []
        self._delays = random.Random()
        self._thread = None

    @property
    def url(self):
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    # counters are the only shared mutable state
    def enter(self):
        with self._lock:
            self._in_flight += 1
            self.request_count += 1
            self.max_concurrent = max(self.max_concurrent, self._in_flight)

    def leave(self):
        with self._lock:
            self._in_flight -= 1

    def inject_faults(self, faults):
        """Queue HTTP status codes (or "hang") to answer before normal handling."""
        with self._lock:
            self._faults.extend(faults)

    def next_fault(self):
        with self._lock:
            return self._faults.pop(0) if self._faults else None

    def log_request_body(self, request):
        with self._lock:
            self.request_log.append(
                {
                    "prompt_sha256": text_digest(str(request.get("prompt"))),
                    "echo": bool(request.get("echo")),
                }
            )

    def delay(self):
        max_delay = self.model.config.max_delay_ms
        if max_delay:
            time.sleep(self._delays.uniform(0, max_delay) / 1000)

    def stats(self):
        with self._lock:
            return {
                "requests": self.request_count,
                "logged": len(self.request_log),
                "in_flight": self._in_flight,
                "max_concurrent": self.max_concurrent,
                "unknown_digests": len(self.model.unknown_digests),
                "endpoint_id": self.model.endpoint_id,
            }

    def handle_complete(self, request):
        model = self.model
        prompt = request["prompt"]
        try:
            if request.get("echo"):
                if not request.get("logprobs") or not model.config.supports_scoring:
                    return 501, {"error": "scoring unsupported"}
                return 200, {"text": "", "tokens": model.score(prompt)}

            text = model.answer(prompt)
            payload = {"text": text}
            if request.get("logprobs") and model.config.supports_scoring:
                payload["tokens"] = model.score(text)
            return 200, payload
        except MockPromptError as e:
            return 400, {"error": f"unrecognized prompt: {e}"}

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        logger.info("Mock endpoint %s listening on %s", self.model.endpoint_id, self.url)
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(config, manifest, host="127.0.0.1", port=0):
    """Start a mock endpoint in a background thread and return the running server."""
    try:
        server = MockServer(MockModel(config, manifest), host=host, port=port)
    except OSError as e:
        raise ConfigError(f"cannot bind mock endpoint to {host}:{port}: {e}")
    return server.start()
