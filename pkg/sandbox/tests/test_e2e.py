"""End-to-end: the golden evaluation run with the real execution worker
reproduces the fake-executor trajectories byte for byte, at accuracy 1.0.

The pipeline is consumed strictly through its CLI; this suite needs the
`toollib` package installed alongside this one.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

GOLDEN = Path(__file__).parents[2] / "tests" / "data" / "golden"

pytestmark = pytest.mark.skipif(
    not GOLDEN.exists(), reason="golden fixtures of the pipeline repo not present"
)


def run_cli(config: Path, out_dir: Path, command: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [
            sys.executable, "-m", "toollib.cli",
            "--config", str(config),
            "--out", str(out_dir),
            "--script", str(GOLDEN / "script.jsonl"),
            "--dataset", str(GOLDEN / "dataset.jsonl"),
            command,
        ],
        capture_output=True,
        text=True,
        timeout=300,
    )


def run_pipeline(config: Path, out_dir: Path) -> None:
    for command in ("create", "cluster", "aggregate", "index", "eval"):
        result = run_cli(config, out_dir, command)
        assert result.returncode == 0, f"{command}: {result.stderr}\n{result.stdout}"


def sandbox_config(tmp_path: Path) -> Path:
    base = (GOLDEN / "config.ini").read_text(encoding="utf-8")
    swapped = base.replace(
        "[executor]\nbackend = canned\ncanned_results = canned_results.json",
        "[executor]\nbackend = sandbox\n"
        f"worker_cmd = {sys.executable} -m sandboxrunner\npool_size = 1",
    )
    assert swapped != base, "expected the canned executor section in the golden config"
    path = tmp_path / "config_sandbox.ini"
    path.write_text(swapped, encoding="utf-8")
    return path


def test_golden_eval_with_real_executor_matches_canned(tmp_path):
    canned_out = tmp_path / "canned"
    sandbox_out = tmp_path / "sandbox"
    run_pipeline(GOLDEN / "config.ini", canned_out)
    run_pipeline(sandbox_config(tmp_path), sandbox_out)

    canned_report = json.loads((canned_out / "eval_report.json").read_text())
    sandbox_report = json.loads((sandbox_out / "eval_report.json").read_text())
    assert sandbox_report["accuracy"] == 1.0
    assert canned_report["accuracy"] == 1.0

    canned_traj = (canned_out / "trajectories.jsonl").read_bytes()
    sandbox_traj = (sandbox_out / "trajectories.jsonl").read_bytes()
    assert sandbox_traj == canned_traj

    # the stored libraries agree too, apart from the embedded config
    # fingerprint (the two runs legitimately use different executor configs)
    canned_manifest = json.loads((canned_out / "library" / "manifest.json").read_text())
    sandbox_manifest = json.loads((sandbox_out / "library" / "manifest.json").read_text())
    for manifest in (canned_manifest, sandbox_manifest):
        manifest.pop("config_fingerprint")
    assert canned_manifest == sandbox_manifest
    print("\nACCEPTANCE sandbox-end-to-end: PASS")
