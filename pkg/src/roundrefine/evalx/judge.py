"""Reasoning judges: a deterministic template-inversion judge and a
subprocess judge speaking newline-delimited JSON."""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading
from typing import Optional, Protocol, Sequence

from ..vocab import FAILURE_TEMPLATES, PREFIXES, SUCCESS_TEMPLATE
from .metrics import token_f1

# index i < 8 is failure mode i, index 8 is success
CORE_TEMPLATES: tuple[tuple[str, ...], ...] = tuple(t for _, t in FAILURE_TEMPLATES) + (SUCCESS_TEMPLATE,)
MATCH_THRESHOLD = 0.6


class JudgeError(RuntimeError):
    pass


class Judge(Protocol):
    def score(self, candidate: Sequence[str], reference: Sequence[str], episode_id: str = "") -> Optional[float]:
        """Score in [0, 1], or None if the episode could not be scored."""


def _strip_prefix(tokens: Sequence[str]) -> tuple[str, ...]:
    tokens = tuple(tokens)
    for p in PREFIXES:
        if tokens[: len(p)] == p:
            return tokens[len(p) :]
    return tokens


def invert_template(tokens: Sequence[str]) -> tuple[int, float]:
    """Nearest core template by token-F1 (lowest index on ties) and that F1."""
    body = _strip_prefix(tokens)
    best, best_f1 = 0, -1.0
    for i, tpl in enumerate(CORE_TEMPLATES):
        f1 = token_f1(body, tpl)
        if f1 > best_f1:
            best, best_f1 = i, f1
    return best, best_f1


class TemplateJudge:
    """1.0 when candidate and reference invert to the same template with
    F1 >= 0.6, otherwise the raw token-F1 of the pair."""

    def score(self, candidate, reference, episode_id=""):
        candidate, reference = list(candidate), list(reference)
        if not candidate:
            return 0.0
        c_mode, c_f1 = invert_template(candidate)
        r_mode, _ = invert_template(reference)
        if c_mode == r_mode and c_f1 >= MATCH_THRESHOLD:
            return 1.0
        return token_f1(_strip_prefix(candidate), _strip_prefix(reference))


class SubprocessJudge:
    """External judge process: one JSON request per line on stdin, one JSON
    response per line on stdout. Failures mark the episode unscored."""

    def __init__(self, command: str | Sequence[str], timeout: float = 10.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True, bufsize=1
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self.errors: list[str] = []

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def score(self, candidate, reference, episode_id=""):
        req = {"id": episode_id, "candidate": list(candidate), "reference": list(reference)}
        try:
            self.proc.stdin.write(json.dumps(req) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            self.errors.append(f"{episode_id}: write failed ({exc})")
            return None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self.errors.append(f"{episode_id}: timeout after {self.timeout}s")
            self.close()
            return None
        if line is None:
            self.errors.append(f"{episode_id}: judge exited")
            return None
        try:
            resp = json.loads(line)
            if resp.get("id") != episode_id:
                raise JudgeError(f"id mismatch {resp.get('id')!r}")
            score = float(resp["score"])
        except (ValueError, KeyError, TypeError, JudgeError) as exc:
            self.errors.append(f"{episode_id}: bad response ({exc})")
            return None
        if score != score:
            self.errors.append(f"{episode_id}: NaN score")
            return None
        return min(1.0, max(0.0, score))

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            self.proc.kill()
            self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_template_judge(stdin, stdout) -> None:
    """Reference judge server loop, usable as a subprocess judge."""
    judge = TemplateJudge()
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        s = judge.score(req["candidate"], req["reference"])
        stdout.write(json.dumps({"id": req["id"], "score": s}) + "\n")
        stdout.flush()


if __name__ == "__main__":
    import sys

    serve_template_judge(sys.stdin, sys.stdout)
