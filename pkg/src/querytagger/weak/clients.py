"""Labeler clients and the prompt cache.

A client is anything with ``complete(prompt) -> str``. :class:`MockLabeler`
answers offline from a lexicon; :class:`RemoteLabeler` posts to an HTTP
completion endpoint configured through environment variables.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.request
from typing import Protocol

from ..corpus.schema import LabelScheme
from ..corpus.synthetic import Lexicon
from .prompts import read_prompt


class LabelerError(RuntimeError):
    """The labeling service could not produce a response."""


class LabelerClient(Protocol):
    def complete(self, prompt: str) -> str: ...


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _unit_hash(*parts) -> float:
    """Deterministic uniform draw in [0, 1) from the given key parts."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big") / 2.0 ** 64


class MockLabeler:
    """Rule-based stand-in for an LLM labeler.

    Each query token gets its lexicon category, ``Other`` when it is in no
    lexicon. A token listed under two categories is resolved, in order of
    preference, by counting category cue words in the search titles present
    in the prompt, by copying the label the token carries in a demonstration,
    and otherwise by a hashed guess. On top, each token is mislabeled with
    probability ``zero_shot_error`` (no demonstrations in the prompt) or
    ``demo_error``, and flipped with probability ``flip_noise``. A share
    ``malformed_rate`` of prompts get a response with the last line dropped.

    Every random choice hashes the prompt, so equal prompts give equal
    responses.
    """

    def __init__(self, lexicon: Lexicon, scheme: LabelScheme, zero_shot_error: float = 0.12,
                 demo_error: float = 0.05, flip_noise: float = 0.0,
                 malformed_rate: float = 0.0, seed: int = 0):
        self.scheme = scheme
        self.token_cats = {t: sorted(cs) for t, cs in lexicon.token_categories().items()}
        self.cues = lexicon.cue_categories()
        self.zero_shot_error = zero_shot_error
        self.demo_error = demo_error
        self.flip_noise = flip_noise
        self.malformed_rate = malformed_rate
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def perfect(cls, lexicon: Lexicon, scheme: LabelScheme) -> "MockLabeler":
        return cls(lexicon, scheme, zero_shot_error=0.0, demo_error=0.0)

    def _other_category(self, cat: str, u: float) -> str:
        options = [c for c in list(self.scheme.categories) + [self.scheme.outside_name] if c != cat]
        return options[min(int(u * len(options)), len(options) - 1)]

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        p = read_prompt(prompt)
        key = (self.seed, prompt_hash(prompt))
        demo_labels: dict[str, str] = {}
        for toks, cats in p.demos:
            for t, c in zip(toks, cats):
                demo_labels.setdefault(t, c)
        cue_counts: dict[str, int] = {}
        for title in p.titles:
            for t in title:
                if t in self.cues:
                    cue_counts[self.cues[t]] = cue_counts.get(self.cues[t], 0) + 1
        err = self.demo_error if p.demos else self.zero_shot_error
        out = []
        for i, tok in enumerate(p.query):
            cands = self.token_cats.get(tok)
            if not cands:
                cat = self.scheme.outside_name
            elif len(cands) == 1:
                cat = cands[0]
            else:
                scores = [cue_counts.get(c, 0) for c in cands]
                if p.titles and max(scores) > 0 and scores.count(max(scores)) == 1:
                    cat = cands[scores.index(max(scores))]
                elif demo_labels.get(tok) in cands:
                    cat = demo_labels[tok]
                else:
                    cat = cands[int(_unit_hash(*key, "guess", i) * len(cands))]
            if _unit_hash(*key, "error", i) < err:
                cat = self._other_category(cat, _unit_hash(*key, "error-cat", i))
            if _unit_hash(*key, "flip", i) < self.flip_noise:
                cat = self._other_category(cat, _unit_hash(*key, "flip-cat", i))
            out.append(f"{tok} -> {cat}")
        if out and _unit_hash(*key, "malformed") < self.malformed_rate:
            out = out[:-1]
        return "\n".join(out)


class RemoteLabeler:
    """Client for a text-completion HTTP endpoint.

    Sends ``{"model", "prompt", "temperature": 0, "max_tokens"}`` as JSON and
    reads the completion from ``text``, ``completion`` or
    ``choices[0].text`` / ``choices[0].message.content`` of the reply.
    Configuration comes from ``LABELER_ENDPOINT``, ``LABELER_MODEL`` and
    ``LABELER_TOKEN`` unless given explicitly.
    """

    def __init__(self, endpoint: str | None = None, model: str | None = None,
                 token: str | None = None, timeout: float = 60.0, max_tokens: int = 256):
        self.endpoint = endpoint or os.environ.get("LABELER_ENDPOINT")
        if not self.endpoint:
            raise LabelerError("no labeler endpoint: set LABELER_ENDPOINT")
        self.model = model or os.environ.get("LABELER_MODEL", "")
        self.token = token if token is not None else os.environ.get("LABELER_TOKEN")
        self.timeout = timeout
        self.max_tokens = max_tokens

    def complete(self, prompt: str) -> str:
        body = json.dumps({"model": self.model, "prompt": prompt, "temperature": 0,
                           "max_tokens": self.max_tokens}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as exc:
            raise LabelerError(f"labeler request failed: {exc}") from exc
        return _completion_text(reply)


def _completion_text(reply) -> str:
    if isinstance(reply, dict):
        for key in ("text", "completion"):
            if isinstance(reply.get(key), str):
                return reply[key]
        choices = reply.get("choices")
        if choices:
            c = choices[0]
            if isinstance(c.get("text"), str):
                return c["text"]
            msg = c.get("message") or {}
            if isinstance(msg.get("content"), str):
                return msg["content"]
    raise LabelerError("unrecognized completion reply")


class PromptCache:
    """Prompt-hash keyed response cache, optionally backed by an append-only
    JSONL file of ``{prompt_hash, prompt, response, timestamp}`` records.

    :meth:`get_or_call` holds a per-prompt lock while calling out, so a
    prompt reaches the client at most once per cache lifetime even under
    concurrent use.
    """

    def __init__(self, path=None, clock=time.time):
        self.path = path
        self.clock = clock
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        self._data[rec["prompt_hash"]] = rec["response"]
                    except (json.JSONDecodeError, KeyError) as exc:
                        raise ValueError(f"{path}:{lineno}: bad cache record ({exc})") from None

    def __len__(self):
        return len(self._data)

    def get(self, prompt: str) -> str | None:
        with self._lock:
            return self._data.get(prompt_hash(prompt))

    def put(self, prompt: str, response: str) -> None:
        h = prompt_hash(prompt)
        with self._lock:
            if h in self._data:
                return
            self._data[h] = response
            if self.path is not None:
                rec = {"prompt_hash": h, "prompt": prompt, "response": response,
                       "timestamp": self.clock()}
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")

    def get_or_call(self, prompt: str, call) -> tuple[str, bool]:
        """``(response, hit)``; ``call(prompt)`` runs only on a miss."""
        h = prompt_hash(prompt)
        with self._lock:
            if h in self._data:
                return self._data[h], True
            key_lock = self._key_locks.setdefault(h, threading.Lock())
        with key_lock:
            cached = self.get(prompt)
            if cached is not None:
                return cached, True
            response = call(prompt)
            self.put(prompt, response)
            return response, False
