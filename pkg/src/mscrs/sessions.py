"""Crash-safe conversation sessions.

Events append to a JSONL store on disk; the in-memory index is rebuilt on
start. Ids are sequential, so a replay against a fresh store reproduces
them. Mutations take a per-session lock; reads return plain dicts.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path


class SessionError(KeyError):
    pass


class SessionStore:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._global_lock = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._sessions: dict[str, dict] = {}
        self._counter = 0
        if self.path.exists():
            self._replay_log()

    def _replay_log(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event["type"] == "create":
                    self._sessions[event["id"]] = {
                        "id": event["id"], "created": event["ts"],
                        "turns": [], "entities": [], "recommendations": []}
                    self._counter = max(self._counter,
                                        int(event["id"].split("-")[1]))
                elif event["type"] == "turn":
                    sess = self._sessions[event["id"]]
                    sess["turns"].append(event["turn"])
                    for eid in event["turn"].get("entities", []):
                        if eid not in sess["entities"]:
                            sess["entities"].append(eid)
                    if event["turn"]["role"] == "system":
                        sess["recommendations"] = event["turn"].get(
                            "recommendations", [])

    def _append(self, event: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def create(self) -> str:
        with self._global_lock:
            self._counter += 1
            sid = f"s-{self._counter:06d}"
            self._sessions[sid] = {"id": sid, "created": time.time(),
                                   "turns": [], "entities": [],
                                   "recommendations": []}
            self._locks[sid] = threading.Lock()
            self._append({"type": "create", "id": sid,
                          "ts": self._sessions[sid]["created"]})
            return sid

    def lock(self, sid: str) -> threading.Lock:
        with self._global_lock:
            if sid not in self._sessions:
                raise SessionError(sid)
            return self._locks.setdefault(sid, threading.Lock())

    def get(self, sid: str) -> dict:
        sess = self._sessions.get(sid)
        if sess is None:
            raise SessionError(sid)
        return sess

    def exists(self, sid: str) -> bool:
        return sid in self._sessions

    def add_turn(self, sid: str, turn: dict) -> None:
        """Caller must hold the session lock."""
        sess = self.get(sid)
        sess["turns"].append(turn)
        for eid in turn.get("entities", []):
            if eid not in sess["entities"]:
                sess["entities"].append(eid)
        if turn["role"] == "system" and "recommendations" in turn:
            sess["recommendations"] = turn["recommendations"]
        self._append({"type": "turn", "id": sid, "turn": turn})

    def snapshot(self, sid: str) -> dict:
        """Read-only view without server-internal fields (timestamps)."""
        sess = self.get(sid)
        return {
            "id": sess["id"],
            "turns": [dict(t) for t in sess["turns"]],
            "entities": list(sess["entities"]),
            "recommendations": [dict(r) for r in sess["recommendations"]],
        }
