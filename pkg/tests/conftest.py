import json

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r if isinstance(r, str) else json.dumps(r))
            fh.write("\n")
    return path


def user(uid, **attrs):
    return {"kind": "user", "id": uid, "attrs": attrs, "gender": None, "occupation": None, "interests": None}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_records():
    return [
        user("u1", age=20.0, city={"cat": 0, "n": 3}),
        user("u2", age=40.0, city={"cat": 2, "n": 3}),
        {"kind": "post", "id": "p1", "author": "u1", "text": "hello world"},
        {"kind": "friend", "a": "u1", "b": "u2"},
    ]


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
