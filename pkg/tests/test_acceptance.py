"""Acceptance suite: one test per criterion, each printing its pass/fail line."""

import re

import pytest

from collapselab.acceptance import CRITERIA, run_criterion


def _slug(name):
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


@pytest.mark.parametrize("number", [c.number for c in CRITERIA], ids=[f"c{c.number:02d}_{_slug(c.name)}" for c in CRITERIA])
def test_criterion(number, capsys):
    outcome = run_criterion(number)
    with capsys.disabled():
        print("\n" + outcome.line())
    assert outcome.passed, outcome.line()
