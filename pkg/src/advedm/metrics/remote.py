"""HTTP client for an LLM that extracts object lists from descriptions.

Speaks the OpenAI-style chat-completions shape: the request carries the
extraction prompt and the description at temperature 0, and the reply's
first choice is parsed as a list of object names.  Failures are raised as
:class:`JudgeError`; callers decide whether to fall back to the offline judge.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time

import httpx
import jsonschema

from advedm.errors import JudgeError
from advedm.metrics.judge import Lexicon, ObjectSet, default_lexicon

logger = logging.getLogger(__name__)

API_KEY_ENV = "ADVEDM_JUDGE_API_KEY"

# Written for this package; not taken from any published prompt.
EXTRACTION_PROMPT = (
    "You list the physical objects mentioned in an image description. "
    "Reply with a JSON array of short lowercase singular nouns, one per distinct object "
    "type that the description says is present. Leave out objects the description says are "
    "absent, colours, actions and places. Reply with the array only."
)

REQUEST_SCHEMA = {
    "type": "object",
    "required": ["model", "messages", "temperature"],
    "properties": {
        "model": {"type": "string", "minLength": 1},
        "temperature": {"const": 0},
        "messages": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["role", "content"],
                "properties": {
                    "role": {"enum": ["system", "user"]},
                    "content": {"type": "string"},
                },
            },
        },
    },
}

RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["choices"],
    "properties": {
        "choices": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["message"],
                "properties": {
                    "message": {
                        "type": "object",
                        "required": ["content"],
                        "properties": {"content": {"type": "string"}},
                    }
                },
            },
        }
    },
}


class _Rejected(JudgeError):
    """HTTP 4xx other than 429; retrying will not help."""


_SPLIT = re.compile(r"[,;\n]+")


def build_request(model: str, text: str, prompt: str = EXTRACTION_PROMPT) -> dict:
    body = {
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt},
            {"role": "user", "content": text},
        ],
    }
    jsonschema.validate(body, REQUEST_SCHEMA)
    return body


def parse_labels(content: str) -> list[str]:
    """Object names from a reply: a JSON array, or a comma/line separated list."""
    content = content.strip()
    fence = re.match(r"^```(?:json)?\s*(.*?)\s*```$", content, re.S)
    if fence:
        content = fence.group(1)
    try:
        value = json.loads(content)
    except json.JSONDecodeError:
        value = None
    if isinstance(value, list):
        items = value
    elif value is None:
        items = [re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", part) for part in _SPLIT.split(content)]
    else:
        raise JudgeError(f"judge reply is JSON but not a list: {content[:80]!r}")
    labels = []
    for item in items:
        if not isinstance(item, str):
            raise JudgeError(f"non-string label in judge reply: {item!r}")
        item = item.strip().strip(".").strip()
        if item:
            labels.append(item)
    return labels


def parse_response(payload: dict, lexicon: Lexicon) -> ObjectSet:
    try:
        jsonschema.validate(payload, RESPONSE_SCHEMA)
    except jsonschema.ValidationError as e:
        raise JudgeError(f"malformed judge response: {e.message}") from e
    labels = parse_labels(payload["choices"][0]["message"]["content"])
    return ObjectSet.of((lexicon.canonical(x) for x in labels), "remote")


class RemoteJudge:
    """Chat-completions object extractor with retries and a concurrency cap."""

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        *,
        timeout: float = 30.0,
        max_retries: int = 2,
        backoff: float = 1.0,
        max_concurrency: int = 4,
        lexicon: Lexicon | None = None,
        client: httpx.Client | None = None,
        prompt: str = EXTRACTION_PROMPT,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff = backoff
        self.lexicon = lexicon or default_lexicon()
        self.prompt = prompt
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def canonical(self, phrase: str) -> str:
        return self.lexicon.canonical(phrase)

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def extract(self, text: str, extra_labels=()) -> ObjectSet:
        if not text.strip():
            return ObjectSet.of((), "remote")
        body = build_request(self.model, text, self.prompt)
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body, headers=self._headers())
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise JudgeError(f"judge endpoint returned HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    raise _Rejected(f"judge endpoint rejected request: HTTP {resp.status_code}")
                return parse_response(resp.json(), self.lexicon)
            except (httpx.HTTPError, ValueError, JudgeError) as e:
                last = e
                if isinstance(e, _Rejected) or attempt == self.max_retries:
                    break
                time.sleep(self.backoff * 2**attempt)
        if isinstance(last, JudgeError):
            raise last
        raise JudgeError(f"judge request failed: {last}") from last

    def close(self):
        self._client.close()
