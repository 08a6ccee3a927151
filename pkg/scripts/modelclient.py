"""
Text-completion endpoint client.

Wire contract (native): POST {base_url}/v1/complete with
    {"prompt", "max_tokens", "temperature", "logprobs", "echo"}
answered by
    {"text", "tokens": [{"token", "logprob", "dist_mean"?, "dist_std"?}]}

OpenAI-compatible servers are reached through the `openai` wire adapter
(POST /v1/completions, choices[0].text / choices[0].logprobs).
"""

import concurrent.futures
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import backoff
import requests
from requests.adapters import HTTPAdapter
from tqdm import tqdm

from errors import (
    CapabilityError,
    ConfigError,
    EndpointError,
    EndpointHTTPError,
    EndpointTimeout,
    MalformedResponse,
)
from logging_config import get_logger
from metrics import rouge_l_f1
from perturb import LETTERS

logger = get_logger(__name__)

TEXT_MATCH_THRESHOLD = 0.5


@dataclass
class EndpointConfig:
    base_url: str = "http://127.0.0.1:8765"
    token_env: str = "AUDIT_API_TOKEN"
    api_style: str = "native"
    model: Optional[str] = None
    endpoint_id: Optional[str] = None
    max_parallel_requests: int = 8
    max_attempts: int = 4
    backoff_base: float = 2.0
    backoff_factor: float = 0.5
    backoff_max: float = 8.0
    timeout: float = 30.0
    temperature: float = 0.0
    max_tokens: int = 32

    def __post_init__(self):
        if self.temperature != 0:
            raise ConfigError("audit runs are fixed at temperature 0")
        if self.max_parallel_requests < 1:
            raise ConfigError("max_parallel_requests must be >= 1")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.api_style not in WIRES:
            raise ConfigError(f"unknown api_style {self.api_style!r}; expected one of {sorted(WIRES)}")
        self.base_url = self.base_url.rstrip("/")
        if self.endpoint_id is None:
            self.endpoint_id = self.base_url

    def public_dict(self):
        """Config as recorded in reports (no secrets; the token is never read here)."""
        return {
            "base_url": self.base_url,
            "endpoint_id": self.endpoint_id,
            "api_style": self.api_style,
            "model": self.model,
            "max_parallel_requests": self.max_parallel_requests,
            "max_attempts": self.max_attempts,
            "timeout": self.timeout,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class TokenScore:
    surface: str
    logprob: float
    dist_mean: Optional[float] = None
    dist_std: Optional[float] = None


@dataclass(frozen=True)
class ParsedAnswer:
    kind: str  # letter | choice-text | free-text | unparseable
    index: Optional[int] = None
    text: Optional[str] = None


UNPARSEABLE = ParsedAnswer("unparseable")


@dataclass
class ModelResponse:
    raw_text: str
    endpoint_id: str
    latency: float
    attempts: int = 1
    tokens: Optional[list] = None
    parsed: Optional[ParsedAnswer] = None
    capabilities: dict = field(default_factory=dict)


# === WIRE ADAPTERS ===
class NativeWire:
    path = "/v1/complete"

    def body(self, config, prompt, max_tokens, logprobs, echo):
        return {
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": config.temperature,
            "logprobs": logprobs,
            "echo": echo,
        }

    def parse(self, data):
        text = data.get("text")
        if not isinstance(text, str):
            raise MalformedResponse("response has no 'text' string")
        raw_tokens = data.get("tokens")
        if raw_tokens is None:
            return text, None
        if not isinstance(raw_tokens, list):
            raise MalformedResponse("'tokens' is not a list")
        return text, [_token_score(t) for t in raw_tokens]


class OpenAIWire:
    path = "/v1/completions"

    def body(self, config, prompt, max_tokens, logprobs, echo):
        body = {
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": config.temperature,
            "echo": echo,
        }
        if config.model:
            body["model"] = config.model
        if logprobs:
            body["logprobs"] = 1
        return body

    def parse(self, data):
        try:
            choice = data["choices"][0]
            text = choice["text"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("response has no choices[0].text")
        logprobs = choice.get("logprobs")
        if not logprobs:
            return text, None
        tokens = []
        for surface, logprob in zip(logprobs.get("tokens", []), logprobs.get("token_logprobs", [])):
            # the first echoed token has no conditional probability
            if logprob is None:
                continue
            tokens.append(_token_score({"token": surface, "logprob": logprob}))
        return text, tokens


WIRES = {"native": NativeWire, "openai": OpenAIWire}


def _token_score(raw):
    try:
        score = TokenScore(
            surface=str(raw["token"]),
            logprob=float(raw["logprob"]),
            dist_mean=None if raw.get("dist_mean") is None else float(raw["dist_mean"]),
            dist_std=None if raw.get("dist_std") is None else float(raw["dist_std"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedResponse(f"bad token record {raw!r}: {e}")
    if score.logprob > 0:
        raise MalformedResponse(f"positive logprob {score.logprob} for token {score.surface!r}")
    if score.dist_std is not None and score.dist_std < 0:
        raise MalformedResponse(f"negative dist_std for token {score.surface!r}")
    return score


class _RetryableStatus(Exception):
    def __init__(self, status, text):
        self.status = status
        self.text = text
        super().__init__(f"HTTP {status}")


RETRYABLE = (requests.Timeout, requests.ConnectionError, _RetryableStatus)


# === CLIENT ===
class ModelClient:
    """
    Shareable across worker threads. At most max_parallel_requests HTTP
    requests are in flight at once; transient failures are retried with
    exponential backoff.
    """

    def __init__(self, config, session=None):
        self.config = config
        self._wire = WIRES[config.api_style]()
        self._slots = threading.BoundedSemaphore(config.max_parallel_requests)

        self._session = session or requests.Session()
        adapter = HTTPAdapter(
            pool_connections=config.max_parallel_requests,
            pool_maxsize=config.max_parallel_requests,
        )
        self._session.mount("http://", adapter)
        self._session.mount("https://", adapter)

        self._headers = {"Content-Type": "application/json"}
        token = os.getenv(config.token_env) if config.token_env else None
        if token:
            self._headers["Authorization"] = f"Bearer {token}"

    @property
    def endpoint_id(self):
        return self.config.endpoint_id

    @property
    def max_parallel(self):
        return self.config.max_parallel_requests

    def close(self):
        self._session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, body, instance_id):
        cfg = self.config
        url = f"{cfg.base_url}{self._wire.path}"
        attempts = 0

        def log_retry(details):
            logger.warning(
                "Retrying %s after %s (attempt %d, waiting %.2fs)",
                instance_id or url,
                details["exception"],
                details["tries"],
                details["wait"],
            )

        @backoff.on_exception(
            backoff.expo,
            RETRYABLE,
            max_tries=cfg.max_attempts,
            on_backoff=log_retry,
            base=cfg.backoff_base,
            factor=cfg.backoff_factor,
            max_value=cfg.backoff_max,
        )
        def send():
            nonlocal attempts
            attempts += 1
            with self._slots:
                r = self._session.post(url, json=body, headers=self._headers, timeout=cfg.timeout)
            if r.status_code == 429 or (r.status_code >= 500 and r.status_code != 501):
                raise _RetryableStatus(r.status_code, r.text)
            return r

        try:
            r = send()
        except requests.Timeout:
            raise EndpointTimeout(
                f"no response from {url} within {cfg.timeout}s", instance_id, attempts
            )
        except requests.ConnectionError as e:
            raise EndpointError(f"cannot reach {url}: {e}", instance_id, attempts)
        except _RetryableStatus as e:
            raise EndpointHTTPError(e.status, _short(e.text), instance_id, attempts)

        if r.status_code >= 400:
            raise EndpointHTTPError(r.status_code, _short(r.text), instance_id, attempts)
        try:
            data = r.json()
        except ValueError:
            raise MalformedResponse("response body is not JSON", instance_id, attempts)
        if not isinstance(data, dict):
            raise MalformedResponse("response body is not an object", instance_id, attempts)
        return data, attempts

    def complete(self, prompt, need_logprobs=False, instance_id=None):
        if not prompt:
            raise ValueError("empty prompt")

        started = time.monotonic()
        body = self._wire.body(self.config, prompt, self.config.max_tokens, need_logprobs, False)
        data, attempts = self._post(body, instance_id)
        try:
            text, tokens = self._wire.parse(data)
        except MalformedResponse as e:
            raise MalformedResponse(str(e), instance_id, attempts)

        response = ModelResponse(
            raw_text=text,
            endpoint_id=self.endpoint_id,
            latency=time.monotonic() - started,
            attempts=attempts,
            tokens=tokens,
        )
        if need_logprobs:
            response.capabilities["logprobs"] = bool(tokens)
            if not tokens:
                logger.debug("Endpoint returned no logprobs for %s", instance_id)
        return response

    def score_sequence(self, text, instance_id=None):
        """Per-token logprobs of `text` itself (echo mode, nothing generated)."""
        if not text:
            raise ValueError("nothing to score")

        body = self._wire.body(self.config, text, 0, True, True)
        try:
            data, attempts = self._post(body, instance_id)
        except EndpointHTTPError as e:
            if e.status in (404, 501):
                raise CapabilityError(f"endpoint does not support scoring: {e}")
            raise
        try:
            _, tokens = self._wire.parse(data)
        except MalformedResponse as e:
            raise MalformedResponse(str(e), instance_id, attempts)
        if not tokens:
            raise CapabilityError("endpoint returned no token scores for an echo request")
        return tokens

    def map(self, fn, items, desc=None, quiet=False):
        """Apply fn to every item on max_parallel worker threads; results in input order."""
        items = list(items)
        results = [None] * len(items)
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_parallel) as executor:
            futures = {executor.submit(fn, item): i for i, item in enumerate(items)}
            progress = tqdm(total=len(items), desc=desc, disable=True if quiet else None)
            for future in concurrent.futures.as_completed(futures):
                results[futures[future]] = future.result()
                progress.update(1)
            progress.close()
        return results


def _short(text, limit=200):
    text = (text or "").strip()
    return text if len(text) <= limit else text[:limit] + "..."


# === ANSWER PARSING ===
# a capital letter with no letter or digit on either side
_STANDALONE_LETTER = re.compile(r"(?<![^\W_])([A-Z])(?![^\W_])")


def parse_mcq_answer(raw_text, k, displayed_choices):
    """
    Letter first, then a unique text match of at least TEXT_MATCH_THRESHOLD
    ROUGE-L F1 against the displayed choices, else unparseable.
    """
    if k < 2:
        raise ConfigError(f"K must be >= 2, got {k}")
    raw_text = raw_text or ""

    for match in _STANDALONE_LETTER.finditer(raw_text):
        index = LETTERS.index(match.group(1))
        if index < k:
            return ParsedAnswer("letter", index=index)

    scores = [rouge_l_f1(raw_text, choice) if choice else 0.0 for choice in displayed_choices[:k]]
    if scores:
        best = max(scores)
        if best >= TEXT_MATCH_THRESHOLD and scores.count(best) == 1:
            return ParsedAnswer("choice-text", index=scores.index(best))
    return UNPARSEABLE


_OPTION_LINE = re.compile(r"^\s*option\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)
_ANSWER_LINE = re.compile(r"^\s*answer\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)


def split_fill_response(raw_text):
    """
    Split a masked-option reply into (answer part, filled option text).

    Replies follow the ts_mcq template ("Answer: <letter>" / "Option: <text>");
    without an Option line the whole reply, minus any Answer line, is the fill.
    """
    raw_text = raw_text or ""
    option = _OPTION_LINE.search(raw_text)
    if option:
        return raw_text[: option.start()], option.group(1).strip()

    answer = _ANSWER_LINE.search(raw_text)
    if answer:
        fill = (raw_text[: answer.start()] + raw_text[answer.end() :]).strip()
        return answer.group(0), fill
    return raw_text, raw_text.strip()


def parse_free_text(raw_text):
    lines = [line.strip() for line in (raw_text or "").splitlines() if line.strip()]
    if not lines:
        return UNPARSEABLE
    return ParsedAnswer("free-text", text=lines[0])
