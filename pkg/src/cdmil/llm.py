"""Chat-completion gateway: provider configs, a content-addressed response
cache, retry with jittered exponential backoff, and tolerant JSON extraction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from .exceptions import (
    AuthMissing,
    ConfigInvalid,
    GatewayTimeout,
    NoJsonFound,
    RetriesExhausted,
    TransportError,
)

log = logging.getLogger(__name__)

API_STYLES = ("openai", "anthropic", "gemini", "mock")
RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str
    model_name: str
    api_style: str = "openai"
    endpoint: str = ""
    api_key_env: str = ""
    max_tokens: int = 512
    temperature: float = 0.7
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.api_style not in API_STYLES:
            raise ConfigInvalid(f"provider {self.provider_id!r}: unknown api_style {self.api_style!r}")
        if self.api_style != "mock" and not self.endpoint:
            raise ConfigInvalid(f"provider {self.provider_id!r}: endpoint required")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ConfigInvalid(f"provider {self.provider_id!r}: bad retry/in-flight limits")

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown provider fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    def decoding(self) -> dict:
        return {
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "frequency_penalty": self.frequency_penalty,
            "presence_penalty": self.presence_penalty,
        }


def load_provider_configs(path: str | Path) -> list[ProviderConfig]:
    raw = json.loads(Path(path).read_text("utf-8"))
    if isinstance(raw, dict):
        raw = raw.get("providers", [])
    return [ProviderConfig.from_dict(d) for d in raw]


def request_hash(provider: ProviderConfig, prompt: str, attempt: int = 0) -> str:
    key = {
        "provider_id": provider.provider_id,
        "model_name": provider.model_name,
        "prompt": prompt,
        "decoding": provider.decoding(),
    }
    if attempt:
        key["attempt"] = attempt
    blob = json.dumps(key, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class CompletionRecord:
    request_hash: str
    raw_text: str
    timestamp: str
    provider_id: str = ""
    model_name: str = ""


class ResponseCache:
    """One JSON file per request hash, written atomically."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> CompletionRecord | None:
        path = self._path(key)
        if not path.exists():
            return None
        return CompletionRecord(**json.loads(path.read_text("utf-8")))

    def put(self, record: CompletionRecord) -> None:
        path = self._path(record.request_hash)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(asdict(record), ensure_ascii=False, indent=1), "utf-8")
            os.replace(tmp, path)

    def snapshot_id(self, keys=None) -> str:
        """Digest over cached request hashes (all of them, or just ``keys``)."""
        if keys is None:
            keys = [p.stem for p in self.root.glob("*/*.json")] if self.root.exists() else []
        h = hashlib.sha256()
        for key in sorted(keys):
            h.update(key.encode())
        return h.hexdigest()[:16]


# (url, headers, payload, timeout) -> (status, parsed json body or text)
Transport = Callable[[str, dict, dict, float], "tuple[int, object]"]


def requests_transport(url, headers, payload, timeout):
    import requests

    try:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    except requests.Timeout as exc:
        raise GatewayTimeout(str(exc)) from exc
    except requests.ConnectionError as exc:
        raise TransportError(None, str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = resp.text
    return resp.status_code, body


def _build_request(provider: ProviderConfig, prompt: str, api_key: str):
    if provider.api_style == "openai":
        headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        payload = {"model": provider.model_name, "messages": [{"role": "user", "content": prompt}]}
        payload.update(provider.decoding())
    elif provider.api_style == "anthropic":
        headers = {
            "x-api-key": api_key,
            "anthropic-version": "2023-06-01",
            "Content-Type": "application/json",
        }
        payload = {
            "model": provider.model_name,
            "max_tokens": provider.max_tokens,
            "temperature": provider.temperature,
            "top_p": provider.top_p,
            "messages": [{"role": "user", "content": prompt}],
        }
    else:  # gemini
        headers = {"x-goog-api-key": api_key, "Content-Type": "application/json"}
        payload = {
            "contents": [{"role": "user", "parts": [{"text": prompt}]}],
            "generationConfig": {
                "maxOutputTokens": provider.max_tokens,
                "temperature": provider.temperature,
                "topP": provider.top_p,
                "frequencyPenalty": provider.frequency_penalty,
                "presencePenalty": provider.presence_penalty,
            },
        }
    return provider.endpoint, headers, payload


def _parse_response(provider: ProviderConfig, body) -> str:
    try:
        if provider.api_style == "openai":
            return body["choices"][0]["message"]["content"]
        if provider.api_style == "anthropic":
            return "".join(part.get("text", "") for part in body["content"])
        parts = body["candidates"][0]["content"]["parts"]
        return "".join(part.get("text", "") for part in parts)
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(200, f"unexpected response shape: {exc}") from exc


class LLMGateway:
    """Send prompts to providers, caching every completion by request hash.

    ``transport`` and ``sleep`` are injectable so retries can be exercised
    without a network or real delays.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_initial: float = 1.0,
        jitter: float = 0.2,
        seed: int | None = None,
    ):
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.transport = transport or requests_transport
        self.sleep = sleep
        self.backoff_initial = backoff_initial
        self.jitter = jitter
        self._rng = random.Random(seed)
        self._limits: dict[str, threading.BoundedSemaphore] = {}
        self._limits_lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0
        self.used_keys: set[str] = set()
        self._mock = MockProvider()

    def _limit(self, provider: ProviderConfig) -> threading.BoundedSemaphore:
        with self._limits_lock:
            sem = self._limits.get(provider.provider_id)
            if sem is None:
                sem = threading.BoundedSemaphore(provider.max_in_flight)
                self._limits[provider.provider_id] = sem
            return sem

    def backoff_delay(self, retry: int) -> float:
        base = self.backoff_initial * (2 ** retry)
        return base * self._rng.uniform(1 - self.jitter, 1 + self.jitter)

    def complete(self, provider: ProviderConfig, prompt: str, attempt: int = 0) -> str:
        """Return the provider's text for ``prompt``.

        ``attempt`` > 0 marks a deliberate re-prompt; it gets its own cache
        slot so that a bad first answer is not replayed.
        """
        key = request_hash(provider, prompt, attempt)
        with self._limits_lock:
            self.used_keys.add(key)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self.cache_hits += 1
                return hit.raw_text

        if provider.api_style == "mock":
            text = self._mock.respond(prompt, provider.provider_id)
        else:
            with self._limit(provider):
                text = self._call_with_retries(provider, prompt)

        if self.cache is not None:
            self.cache.put(
                CompletionRecord(
                    request_hash=key,
                    raw_text=text,
                    timestamp=datetime.now(timezone.utc).isoformat(),
                    provider_id=provider.provider_id,
                    model_name=provider.model_name,
                )
            )
        return text

    def _call_with_retries(self, provider: ProviderConfig, prompt: str) -> str:
        api_key = os.environ.get(provider.api_key_env, "") if provider.api_key_env else ""
        if not api_key:
            raise AuthMissing(
                f"provider {provider.provider_id!r}: set ${provider.api_key_env or '<api_key_env>'}"
            )
        url, headers, payload = _build_request(provider, prompt, api_key)
        last_error: Exception | None = None
        attempts = 0
        for attempt in range(provider.max_retries + 1):
            if attempt:
                self.sleep(self.backoff_delay(attempt - 1))
            attempts += 1
            self.network_calls += 1
            try:
                status, body = self.transport(url, headers, payload, provider.timeout)
            except GatewayTimeout as exc:
                last_error = exc
                log.warning("%s: timeout (attempt %d)", provider.provider_id, attempts)
                continue
            except TransportError as exc:
                last_error = exc
                log.warning("%s: %s (attempt %d)", provider.provider_id, exc, attempts)
                continue
            if status == 200:
                return _parse_response(provider, body)
            if status in (401, 403):
                raise AuthMissing(f"provider {provider.provider_id!r} rejected credentials ({status})")
            err = TransportError(status, str(body)[:200])
            if status not in RETRYABLE_STATUS:
                raise err
            last_error = err
            log.warning("%s: HTTP %s (attempt %d)", provider.provider_id, status, attempts)
        raise RetriesExhausted(attempts, last_error)


def extract_json_payload(raw_text: str) -> str:
    """Return the first complete top-level JSON array or object in ``raw_text``.

    Code fences and surrounding prose are ignored.  Candidates are found by
    bracket matching (string literals and escapes respected) and the first
    one that actually parses wins.
    """
    if not raw_text or not raw_text.strip():
        raise NoJsonFound("empty response")
    text = raw_text
    start = 0
    while True:
        candidates = [i for i in (text.find("[", start), text.find("{", start)) if i >= 0]
        if not candidates:
            raise NoJsonFound("no JSON value found")
        begin = min(candidates)
        end = _match_brackets(text, begin)
        if end is not None:
            chunk = text[begin : end + 1]
            try:
                json.loads(chunk)
                return chunk
            except json.JSONDecodeError:
                pass
        start = begin + 1


def _match_brackets(text: str, begin: int) -> int | None:
    closing = {"[": "]", "{": "}"}
    stack = []
    in_string = False
    escaped = False
    for i in range(begin, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in closing:
            stack.append(closing[ch])
        elif ch in "]}":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return i
    return None


# ---------------------------------------------------------------------------
# offline mock
# ---------------------------------------------------------------------------

# keyword -> KoACD type; Therapist QA names are mapped below
_MOCK_RULES = [
    (("should", "must", "have to", "ought"), "Should Statements"),
    (("always", "never", "everyone", "nobody", "everything"), "Overgeneralization"),
    (("failure", "loser", "worthless", "stupid", "idiot", "lacking", "slob"), "Labeling"),
    (("i feel", "i felt", "feel like"), "Emotional Reasoning"),
    (("perfect", "total", "completely", "either"), "All-or-Nothing Thinking"),
    (("my fault", "because of me", "blame", "did something wrong", "what i did"), "Personalization"),
    (("will ", "going to", "probably", "must be mad", "they think", "must think"), "Jumping to Conclusions"),
    (("only remember", "ignore", "mistake", "negative"), "Mental Filter"),
    (("but ", "just being polite", "doesn't count", "luck"), "Discounting the Positive"),
    (("terrible", "disaster", "ruined", "incompetent", "one little"), "Magnification and Minimization"),
]

_TQA_NAMES = {
    "Should Statements": "Should statements",
    "Overgeneralization": "Overgeneralization",
    "Labeling": "Labeling",
    "Emotional Reasoning": "Emotional reasoning",
    "All-or-Nothing Thinking": "All-or-nothing thinking",
    "Personalization": "Personalization",
    "Mental Filter": "Mental filter",
    "Discounting the Positive": "Mental filter",
    "Magnification and Minimization": "Magnification",
}

_EMOTION_WORDS = [
    ("worthless", "worthlessness"),
    ("sad", "sadness"),
    ("depress", "sadness"),
    ("anxious", "anxiety"),
    ("afraid", "fear"),
    ("scared", "fear"),
    ("angry", "anger"),
    ("mad", "anger"),
    ("crushed", "pressure"),
    ("lonely", "loneliness"),
    ("guilt", "guilt"),
    ("ashamed", "shame"),
    ("hate", "resentment"),
]

_BEHAVIOR_WORDS = ("decided", "avoid", "quit", "stop", "try", "won't go", "stay home", "skip")


def _digest_unit(*parts: str) -> float:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def _quoted_sentence(prompt: str) -> str:
    marker = "The user said the following sentence:"
    idx = prompt.find(marker)
    if idx < 0:
        return prompt
    line = prompt[idx + len(marker) :].lstrip("\n").split("\n", 1)[0].strip()
    if len(line) >= 2 and line[0] == '"' and line[-1] == '"':
        line = line[1:-1]
    return line


def _clauses(sentence: str) -> list[str]:
    out, buf = [], []
    for ch in sentence:
        buf.append(ch)
        if ch in ".?!,;":
            piece = "".join(buf).strip()
            if piece:
                out.append(piece)
            buf = []
    tail = "".join(buf).strip()
    if tail:
        out.append(tail)
    return out or [sentence]


class MockProvider:
    """Deterministic stand-in for an LLM; a pure function of (prompt, provider_id).

    It recognises the ELB and the instance-inference prompts, pulls the quoted
    sentence out, and answers with schema-valid JSON built from keyword rules.
    Different provider ids drop or add instances in different, fixed ways, so
    aggregated bags look like multi-model output.
    """

    def respond(self, prompt: str, provider_id: str) -> str:
        sentence = _quoted_sentence(prompt)
        if "Please analyze the sentence according to the following three aspects" in prompt:
            return json.dumps(self.elb(sentence), ensure_ascii=False)
        if "cognitive distortion types" in prompt:
            therapist = "Mind Reading" in prompt
            elb_lines = [ln for ln in prompt.splitlines() if ln.startswith(("Emotion: ", "Logic: ", "Behavior: "))]
            items = self.instances(sentence, provider_id, therapist, elb_lines)
            body = json.dumps(items, ensure_ascii=False)
            if _digest_unit(provider_id, "fence") < 0.5:
                return f"```json\n{body}\n```"
            return body
        return json.dumps({"error": "unrecognised prompt"})

    @staticmethod
    def elb(sentence: str) -> dict:
        low = sentence.lower()
        feelings = []
        for word, noun in _EMOTION_WORDS:
            if word in low and noun not in feelings:
                feelings.append(noun)
        if feelings:
            emotion = "The speaker expresses " + " and ".join(feelings) + "."
        else:
            emotion = "Not applicable"
        if any(k in low for k in (" so ", "because", "if ", "therefore", "means")):
            logic = "The speaker draws a broad conclusion from a feeling or a single event."
        else:
            logic = "Not applicable"
        acts = [w for w in _BEHAVIOR_WORDS if w in low]
        if acts:
            behavior = f"The speaker describes an action or intention ({acts[0].strip()})."
        else:
            behavior = "Not applicable"
        return {"emotion": emotion, "logic": logic, "behavior": behavior}

    @staticmethod
    def instances(sentence: str, provider_id: str, therapist: bool, elb_lines: list[str]) -> list[dict]:
        low = sentence.lower()
        clauses = _clauses(sentence)
        hits = []
        for keywords, label in _MOCK_RULES:
            count = sum(low.count(k) for k in keywords)
            if therapist and label == "Jumping to Conclusions":
                if any(k in low for k in ("they think", "must think", "must be mad")):
                    label = "Mind Reading"
                else:
                    label = "Fortune-telling"
            elif therapist:
                label = _TQA_NAMES[label]
            if count == 0:
                continue
            # each provider misses some rules
            if _digest_unit(provider_id, label, sentence) < 0.2:
                continue
            keyword = next(k for k in keywords if k in low)
            text = next((c for c in clauses if keyword in c.lower()), clauses[0])
            hits.append([label, text, float(count)])

        elb_text = " ".join(elb_lines).lower()
        if "the speaker expresses" in elb_text:
            # ELB context nudges the model towards the emotion-driven reading
            label = "Emotional reasoning" if therapist else "Emotional Reasoning"
            hits.append([label, clauses[0], 1.0])
        if "broad conclusion" in elb_text:
            for h in hits:
                h[2] += 0.5

        labels = [lab for _, lab in _MOCK_RULES]
        if therapist:
            labels = sorted(set(_TQA_NAMES.values()) | {"Mind Reading", "Fortune-telling"})
        u = _digest_unit(provider_id, "extra", sentence)
        extra = labels[int(u * len(labels)) % len(labels)]
        hits.append([extra, clauses[int(u * 997) % len(clauses)], 0.5])

        total = sum(h[2] * (0.8 + 0.4 * _digest_unit(provider_id, h[0], h[1])) for h in hits)
        out = []
        for label, text, weight in hits:
            w = weight * (0.8 + 0.4 * _digest_unit(provider_id, label, text))
            out.append({"type": label, "salience score": round(w / total, 3), "relevant_text": text})
        return out
