from __future__ import annotations

import json
import subprocess
import sys

import pytest

APPLY_BAYES_CODE = '''\
def apply_bayes(likelihood_A: float, prior_A: float,
likelihood_not_A: float, prior_not_A: float) -> float:
    # Calculate the numerator of Bayes' theorem: P(B|A) * P(A)
    numerator = likelihood_A * prior_A

    # Calculate the total probability of the evidence B (the denominator):
    # P(B) = P(B|A)P(A) + P(B|not A)P(not A)
    marginal_likelihood = (likelihood_A * prior_A) \\
    + (likelihood_not_A * prior_not_A)

    # Avoid division by zero if the evidence is impossible
    if marginal_likelihood == 0:
        return 0.0

    # Compute the posterior probability
    posterior_A = numerator / marginal_likelihood

    return posterior_A
'''


class WorkerProcess:
    """Thin line-protocol client for conformance tests."""

    def __init__(self) -> None:
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "sandboxrunner"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )
        self.handshake = json.loads(self.proc.stdout.readline())

    def request_line(self, line: str) -> dict:
        self.proc.stdin.write(line.rstrip("\n") + "\n")
        self.proc.stdin.flush()
        return json.loads(self.proc.stdout.readline())

    def request(self, payload: dict) -> dict:
        return self.request_line(json.dumps(payload))

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=5)


@pytest.fixture()
def worker():
    w = WorkerProcess()
    yield w
    w.close()
