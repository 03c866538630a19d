from __future__ import annotations

from pathlib import Path

import pytest

from tabgen.backend import ChatRequest, ChatResponse
from tabgen.corpus import load_corpus, mini_corpus_path

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

SUBTASK_NAMES = [
    "Header Explanation",
    "Abbreviation Expansion",
    "Data Format Resolution",
    "Entity Extraction and Grouping",
    "Table Generation",
]


class CannedBackend:
    """Test double: answers every request from a function of the request."""

    def __init__(self, reply):
        self.reply = reply
        self.requests: list[ChatRequest] = []

    def send(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        return ChatResponse(self.reply(request), tokens_in=3, tokens_out=2, latency_ms=1)


def last_user(request: ChatRequest) -> str:
    return request.messages[-1].content


@pytest.fixture(scope="session")
def rotowire_corpus():
    return load_corpus(mini_corpus_path("rotowire"), "rotowire")


@pytest.fixture(scope="session")
def livesum_corpus():
    return load_corpus(mini_corpus_path("livesum"), "livesum")


# --- acceptance summary: one line per criterion at the end of the run ---

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _ACCEPTANCE[name] = report.outcome
    elif report.when == "setup" and report.outcome in ("skipped", "failed"):
        _ACCEPTANCE[name] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    labels = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{labels.get(_ACCEPTANCE[name], '?')}  {name}")
