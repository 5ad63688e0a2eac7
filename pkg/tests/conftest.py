import json
import os
from pathlib import Path

import pytest

from txflow.case_io import find_case, parse_json_case, to_network

CASES = Path(__file__).resolve().parent.parent / "cases"


@pytest.fixture
def cases_dir():
    return CASES


@pytest.fixture
def two_bus():
    return to_network(parse_json_case((CASES / "two_bus.json").read_text()))


@pytest.fixture
def three_bus():
    return to_network(parse_json_case((CASES / "three_bus.json").read_text()))


def json_network(doc):
    return to_network(parse_json_case(json.dumps(doc)))


def public_case(name):
    """Path of a public MATPOWER case, or skip when the case data is not installed."""
    try:
        return find_case(name)
    except FileNotFoundError:
        pytest.skip(f"{name} not available (install 'matpower' or set TXFLOW_CASE_DIR)")


def pytest_report_header(config):
    return f"TXFLOW_CASE_DIR={os.environ.get('TXFLOW_CASE_DIR', '')}"


def pytest_terminal_summary(terminalreporter):
    from reference import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        parts = ACCEPTANCE.get(n)
        if parts is None:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + " | ".join(d for _, d in parts))
