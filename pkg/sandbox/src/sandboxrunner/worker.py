"""Worker loop: one JSON request per stdin line, one JSON response per
stdout line.

Requests:
    {"op": "syntax_check", "code": ..., "timeout_ms": ...}
    {"op": "invoke", "code": ..., "entry": ..., "args": <JSON map or its
     text form>, "timeout_ms": ...}

Responses carry exactly one of ``result`` (stringified return value) or
``error`` ({"kind": syntax|runtime|timeout|protocol, "message": ...}), plus
whatever the tool printed on ``stdout``. Tool code runs in a fresh child
process per invoke, so crashes and runaway loops never take the worker
down; the child refuses network imports via a denylist (a policy gate, not
a security boundary).
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys

from . import PROTOCOL_VERSION, __version__

MIN_TIMEOUT_MS = 100
MAX_TIMEOUT_MS = 120000

# Executed inside the per-invoke child. Reads {"code", "entry", "args"} as
# JSON on stdin, prints one JSON result line. The denylist hook rejects
# network modules before any tool code runs.
_CHILD_SOURCE = r"""
import builtins, contextlib, io, json, sys

DENYLIST = {
    "socket", "ssl", "http", "urllib", "urllib3", "requests", "httpx",
    "ftplib", "poplib", "imaplib", "smtplib", "telnetlib", "socketserver",
    "xmlrpc", "webbrowser",
}

_real_import = builtins.__import__


def _guarded_import(name, *args, **kwargs):
    root = name.split(".")[0]
    if root in DENYLIST:
        raise ImportError(f"import of {root!r} is disallowed in the tool sandbox")
    return _real_import(name, *args, **kwargs)


builtins.__import__ = _guarded_import

payload = json.loads(sys.stdin.read())
captured = io.StringIO()
out = {"stdout": ""}
try:
    namespace = {}
    with contextlib.redirect_stdout(captured):
        exec(compile(payload["code"], "<tool>", "exec"), namespace)
        entry = namespace.get(payload["entry"])
        if entry is None:
            raise NameError(f"{payload['entry']} not found in tool code")
        value = entry(**payload["args"])
    out["ok"] = True
    out["result"] = str(value)
except SyntaxError as exc:
    out["ok"] = False
    out["error"] = {
        "kind": "syntax",
        "message": f"{exc.msg} (line {exc.lineno}, column {exc.offset})",
    }
except BaseException as exc:  # tool code may raise anything, including SystemExit
    out["ok"] = False
    out["error"] = {"kind": "runtime", "message": f"{type(exc).__name__}: {exc}"}
out["stdout"] = captured.getvalue()
sys.stdout.write(json.dumps(out))
"""


def _error(kind: str, message: str, stdout: str = "") -> dict:
    return {"ok": False, "stdout": stdout, "error": {"kind": kind, "message": message}}


def _success(result: str, stdout: str = "") -> dict:
    return {"ok": True, "result": result, "stdout": stdout}


def syntax_check(code: str) -> dict:
    try:
        compile(code, "<tool>", "exec")
    except SyntaxError as exc:
        return _error(
            "syntax", f"{exc.msg} (line {exc.lineno}, column {exc.offset})"
        )
    except ValueError as exc:
        return _error("syntax", str(exc))
    return _success("")


def invoke(code: str, entry: str, args: dict, timeout_ms: int) -> dict:
    payload = json.dumps({"code": code, "entry": entry, "args": args})
    try:
        child = subprocess.Popen(
            [sys.executable, "-I", "-c", _CHILD_SOURCE],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )
    except OSError as exc:
        return _error("runtime", f"cannot spawn tool process: {exc}")
    try:
        out, _ = child.communicate(payload, timeout=timeout_ms / 1000.0)
    except subprocess.TimeoutExpired:
        child.kill()
        child.communicate()
        return _error("timeout", f"tool exceeded {timeout_ms} ms and was killed")
    if child.returncode != 0 or not out.strip():
        return _error("runtime", f"tool process died (exit {child.returncode})")
    try:
        reply = json.loads(out)
    except json.JSONDecodeError:
        return _error("runtime", "tool process produced unparseable output")
    if reply.get("ok"):
        return _success(str(reply.get("result", "")), str(reply.get("stdout", "")))
    error = reply.get("error") or {"kind": "runtime", "message": "unknown failure"}
    return _error(
        str(error.get("kind", "runtime")),
        str(error.get("message", "")),
        str(reply.get("stdout", "")),
    )


def handle_request(line: str) -> dict:
    try:
        request = json.loads(line)
    except json.JSONDecodeError as exc:
        return _error("protocol", f"request line is not JSON: {exc}")
    if not isinstance(request, dict):
        return _error("protocol", "request must be a JSON object")

    op = request.get("op")
    code = request.get("code")
    if op not in ("syntax_check", "invoke"):
        return _error("protocol", f"unknown op {op!r}")
    if not isinstance(code, str):
        return _error("protocol", "code must be a string")

    timeout_ms = request.get("timeout_ms", MAX_TIMEOUT_MS)
    if not isinstance(timeout_ms, int) or not MIN_TIMEOUT_MS <= timeout_ms <= MAX_TIMEOUT_MS:
        return _error(
            "protocol",
            f"timeout_ms must be an integer in [{MIN_TIMEOUT_MS}, {MAX_TIMEOUT_MS}]",
        )

    if op == "syntax_check":
        return syntax_check(code)

    entry = request.get("entry")
    if not entry or not isinstance(entry, str):
        return _error("protocol", "invoke requires a non-empty entry name")
    args = request.get("args", {})
    if isinstance(args, str):
        try:
            args = json.loads(args) if args.strip() else {}
        except json.JSONDecodeError as exc:
            return _error("protocol", f"args is not valid JSON: {exc}")
    if not isinstance(args, dict):
        return _error("protocol", "args must decode to an object of parameters")
    return invoke(code, entry, args, timeout_ms)


def serve(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stdout.write(
        json.dumps(
            {
                "protocol_version": PROTOCOL_VERSION,
                "worker": "sandboxrunner",
                "version": __version__,
            }
        )
        + "\n"
    )
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        response = handle_request(line)
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sandbox-runner", description=__doc__)
    parser.add_argument("--version", action="store_true", help="print version and exit")
    options = parser.parse_args(argv)
    if options.version:
        print(json.dumps({"worker": "sandboxrunner", "version": __version__,
                          "protocol_version": PROTOCOL_VERSION}))
        return 0
    serve()
    return 0


if __name__ == "__main__":
    sys.exit(main())
