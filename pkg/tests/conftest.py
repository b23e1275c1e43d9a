"""Per-criterion PASS/FAIL lines for tests marked ``acceptance(number, title)``."""

_criteria: dict = {}


def _marker(item):
    m = item.get_closest_marker("acceptance")
    if m is None:
        return None
    return m.args[0], m.args[1] if len(m.args) > 1 else ""


def pytest_collection_modifyitems(items):
    for item in items:
        key = _marker(item)
        if key is not None:
            _criteria.setdefault(key[0], {"title": key[1], "outcomes": {}})
            item.user_properties.append(("acceptance", key[0]))


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("acceptance")
    if number is None:
        return
    outcomes = _criteria[number]["outcomes"]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcomes[report.nodeid] = report.outcome
    elif report.when == "teardown" and report.failed:
        outcomes[report.nodeid] = "failed"


def criterion_status(outcomes: dict) -> str:
    values = set(outcomes.values())
    if not values:
        return "NOT RUN"
    if "failed" in values:
        return "FAIL"
    if values == {"skipped"}:
        return "SKIP"
    return "PASS"


def pytest_terminal_summary(terminalreporter):
    ran = {k: c for k, c in _criteria.items() if c["outcomes"]}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ran):
        c = ran[number]
        status = criterion_status(c["outcomes"])
        skipped = sum(v == "skipped" for v in c["outcomes"].values())
        note = f" ({skipped} skipped)" if skipped and status == "PASS" else ""
        terminalreporter.write_line(f"ACCEPTANCE {number}: {status} {c['title']}{note}")
