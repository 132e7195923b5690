"""Client pool for the execution worker's JSON-over-stdio protocol.

One worker process handles requests sequentially; this side pools N workers
for parallelism and respawns any worker that dies or overruns its deadline.
The worker binary is configured as a shell-split command line, so the
runner package stays a separate deliverable.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading

from .model import AggregatedTool, Tool
from .runtime import ExecResult

PROTOCOL_VERSION = 1


class SandboxClientError(Exception):
    pass


class _Worker:
    def __init__(self, cmd: list[str]) -> None:
        self._cmd = cmd
        self._proc: subprocess.Popen | None = None
        self._spawn()

    def _spawn(self) -> None:
        self._proc = subprocess.Popen(
            self._cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
        )
        handshake = self._read_line(timeout_s=10.0)
        if handshake is None:
            raise SandboxClientError(f"worker {self._cmd} produced no handshake line")
        try:
            version = json.loads(handshake).get("protocol_version")
        except json.JSONDecodeError as exc:
            raise SandboxClientError(
                f"worker handshake is not JSON: {handshake!r}"
            ) from exc
        if version != PROTOCOL_VERSION:
            raise SandboxClientError(
                f"worker speaks protocol {version}, expected {PROTOCOL_VERSION}"
            )

    def _read_line(self, timeout_s: float) -> str | None:
        assert self._proc is not None and self._proc.stdout is not None
        box: list[str | None] = [None]

        def reader() -> None:
            box[0] = self._proc.stdout.readline()

        thread = threading.Thread(target=reader, daemon=True)
        thread.start()
        thread.join(timeout_s)
        if thread.is_alive():
            return None
        line = box[0]
        return line if line else None

    def request(self, payload: dict, timeout_s: float) -> dict | None:
        """One request line, one response line; None means the worker is gone
        or unresponsive (caller respawns)."""
        assert self._proc is not None
        if self._proc.poll() is not None:
            return None
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            return None
        line = self._read_line(timeout_s)
        if line is None:
            return None
        try:
            return json.loads(line)
        except json.JSONDecodeError:
            return None

    def kill(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait(timeout=5)


class WorkerPool:
    """Fixed-size pool; borrow/return with automatic respawn."""

    def __init__(self, cmd: str, size: int = 2) -> None:
        if not cmd.strip():
            raise SandboxClientError("worker command is empty")
        self._cmd = shlex.split(cmd)
        self._queue: queue.Queue[_Worker] = queue.Queue()
        for _ in range(size):
            self._queue.put(_Worker(self._cmd))

    def request(self, payload: dict, timeout_s: float) -> dict:
        worker = self._queue.get()
        try:
            response = worker.request(payload, timeout_s)
            if response is None:
                worker.kill()
                worker = _Worker(self._cmd)
                return {
                    "ok": False,
                    "result": "",
                    "stdout": "",
                    "error": {"kind": "timeout", "message": "worker unresponsive; respawned"},
                }
            return response
        finally:
            self._queue.put(worker)

    def close(self) -> None:
        while not self._queue.empty():
            self._queue.get_nowait().kill()


class SandboxExecutor:
    """Executor backed by the worker pool."""

    def __init__(self, pool: WorkerPool) -> None:
        self._pool = pool

    @classmethod
    def from_command(cls, cmd: str, size: int = 2) -> "SandboxExecutor":
        return cls(WorkerPool(cmd, size))

    def invoke(self, tool, function_name: str, arguments: str, timeout_s: float) -> ExecResult:
        if isinstance(tool, AggregatedTool):
            code = tool.full_code
        elif isinstance(tool, Tool):
            code = tool.code
        else:
            code = str(tool)
        timeout_ms = max(100, min(120000, int(timeout_s * 1000)))
        response = self._pool.request(
            {
                "op": "invoke",
                "code": code,
                "entry": function_name,
                "args": arguments,
                "timeout_ms": timeout_ms,
            },
            timeout_s + 5.0,
        )
        if response.get("ok"):
            return ExecResult(ok=True, result=str(response.get("result", "")))
        error = response.get("error") or {}
        return ExecResult(
            ok=False,
            result="",
            stderr=f"{error.get('kind', 'unknown')}: {error.get('message', '')}",
        )

    def syntax_check(self, code: str, timeout_s: float = 10.0) -> ExecResult:
        response = self._pool.request(
            {"op": "syntax_check", "code": code, "timeout_ms": 10000}, timeout_s
        )
        if response.get("ok"):
            return ExecResult(ok=True, result="")
        error = response.get("error") or {}
        return ExecResult(ok=False, result="", stderr=str(error.get("message", "")))

    def close(self) -> None:
        self._pool.close()
