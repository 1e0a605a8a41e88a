"""Provider-agnostic chat-completion access with caching, retries, and replay.

Every request is content-addressed: the canonicalized request plus a sample
index hashes to a cache key, and responses are stored one file per entry
under the cache directory. In replay mode no transport is configured and a
cache miss is an error naming the missing key, which makes recorded pipeline
runs bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

logger = logging.getLogger(__name__)


class ProviderError(RuntimeError):
    """Transport or provider failure that survived the retry budget."""


class TransientProviderError(ProviderError):
    """Retryable transport failure (connection error, 429, 5xx)."""


class ReplayMissError(ProviderError):
    """Offline run requested a response that is not in the cache."""

    def __init__(self, key: str):
        super().__init__(f"replay miss: no cached response for key {key}")
        self.key = key


@dataclass(frozen=True)
class Message:
    role: str
    text: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    top_p: float = 0.9
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} not in [0,1]")
        if not 0.0 <= self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} not in [0,1]")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "messages": [{"role": m.role, "text": m.text} for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }


def user_request(model_id: str, text: str, *, temperature: float = 0.0,
                 top_p: float = 0.9, max_tokens: Optional[int] = None) -> ChatRequest:
    return ChatRequest(
        model_id=model_id,
        messages=(Message("user", text),),
        temperature=temperature,
        top_p=top_p,
        max_tokens=max_tokens,
    )


def request_key(req: ChatRequest, sample_index: int = 0) -> str:
    """Deterministic content hash of a request plus its sample index.

    The payload is serialized with sorted keys and ASCII escapes, so field
    order and encoding quirks cannot change the key.
    """
    payload = {"request": req.to_dict(), "sample_index": sample_index}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


@dataclass
class CacheEntry:
    key: str
    request: dict
    sample_index: int
    response_text: str
    timestamp: float


class ResponseCache:
    """One file per entry under ``root/<key[:2]>/<key>.json``.

    Writes are atomic (write to a temp file, then rename), so concurrent
    writers at worst redo each other's work.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[CacheEntry]:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        return CacheEntry(
            key=rec["key"],
            request=rec["request"],
            sample_index=rec["sample_index"],
            response_text=rec["response_text"],
            timestamp=rec["timestamp"],
        )

    def put(self, entry: CacheEntry) -> None:
        path = self._path(entry.key)
        path.parent.mkdir(parents=True, exist_ok=True)
        rec = {
            "key": entry.key,
            "request": entry.request,
            "sample_index": entry.sample_index,
            "response_text": entry.response_text,
            "timestamp": entry.timestamp,
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(rec, fh, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def __contains__(self, key: str) -> bool:
        return self._path(key).exists()


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.5  # doubles per attempt


class HttpTransport:
    """JSON-over-HTTP chat completion (messages in, choices text out).

    The sample index is ignored on the wire; resamples of one request are
    distinguished only by the provider's own sampling.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout_s: float = 120.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout_s = timeout_s

    def __call__(self, req: ChatRequest, sample_index: int = 0) -> str:
        import httpx

        body = {
            "model": req.model_id,
            "messages": [{"role": m.role, "content": m.text} for m in req.messages],
            "temperature": req.temperature,
            "top_p": req.top_p,
        }
        if req.max_tokens is not None:
            body["max_tokens"] = req.max_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout_s)
        except httpx.TransportError as exc:
            raise TransientProviderError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc


@dataclass
class BatchResult:
    text: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class ChatClient:
    """Cached chat client. With ``transport=None`` the client is offline and
    serves strictly from the cache."""

    def __init__(
        self,
        *,
        cache: ResponseCache,
        transport: Optional[Callable[[ChatRequest, int], str]] = None,
        max_concurrency: int = 4,
        retry: RetryPolicy = RetryPolicy(),
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cache = cache
        self.transport = transport
        self.max_concurrency = max(1, max_concurrency)
        self.retry = retry
        self.sleep = sleep

    @property
    def offline(self) -> bool:
        return self.transport is None

    def send(self, req: ChatRequest, sample_index: int = 0) -> str:
        key = request_key(req, sample_index)
        hit = self.cache.get(key)
        if hit is not None:
            return hit.response_text
        if self.transport is None:
            raise ReplayMissError(key)
        text = self._call_with_retries(req, sample_index)
        self.cache.put(
            CacheEntry(
                key=key,
                request=req.to_dict(),
                sample_index=sample_index,
                response_text=text,
                timestamp=time.time(),
            )
        )
        return text

    def _call_with_retries(self, req: ChatRequest, sample_index: int) -> str:
        delay = self.retry.backoff_s
        last: Optional[Exception] = None
        for attempt in range(self.retry.max_attempts):
            try:
                return self.transport(req, sample_index)
            except TransientProviderError as exc:
                last = exc
                if attempt + 1 < self.retry.max_attempts:
                    logger.warning("transient provider failure (attempt %d): %s", attempt + 1, exc)
                    self.sleep(delay)
                    delay *= 2
        raise ProviderError(
            f"gave up after {self.retry.max_attempts} attempts: {last}"
        ) from last

    def send_batch(
        self, reqs: Sequence[ChatRequest], sample_indices: Optional[Sequence[int]] = None
    ) -> list[BatchResult]:
        """Send requests concurrently; results come back in input order.

        Per-item failures are reported in the corresponding slot and never
        abort the rest of the batch.
        """
        if sample_indices is None:
            sample_indices = [0] * len(reqs)
        if len(sample_indices) != len(reqs):
            raise ValueError("sample_indices must match reqs in length")
        if not reqs:
            return []

        def one(req_and_idx):
            req, idx = req_and_idx
            try:
                return BatchResult(text=self.send(req, idx))
            except ProviderError as exc:
                return BatchResult(error=str(exc))

        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            return list(pool.map(one, zip(reqs, sample_indices)))
