"""Shared pytest hooks: echo the acceptance criterion lines at the end.

The acceptance tests print one "criterion N (...): PASS/FAIL" line each, but
pytest swallows stdout for passing tests. Criterion lines recorded here are
replayed in the terminal summary so a plain `pytest -v` run shows all ten.
"""

CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in dict.fromkeys(CRITERION_LINES):
            terminalreporter.write_line(line)
