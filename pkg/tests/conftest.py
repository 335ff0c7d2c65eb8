_criteria: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            n = mark.args[0]
            entry = _criteria.setdefault(n, {"title": mark.kwargs.get("title", ""), "outcomes": [], "notes": []})
            entry.setdefault("nodeids", set()).add(item.nodeid)


def pytest_runtest_logreport(report):
    for n, entry in _criteria.items():
        if report.nodeid not in entry["nodeids"]:
            continue
        if report.when == "call" or report.outcome != "passed":
            if report.skipped:
                entry["outcomes"].append("skipped")
                entry["notes"].append(str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")
            else:
                entry["outcomes"].append(report.outcome)


def _verdict(outcomes):
    if "failed" in outcomes:
        return "FAIL"
    if outcomes and all(o == "skipped" for o in outcomes):
        return "SKIP"
    return "PASS" if outcomes else "NOT RUN"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        line = f"criterion {n}: {_verdict(entry['outcomes'])} - {entry['title']}"
        notes = [s for s in entry["notes"] if s]
        if notes:
            line += f" ({notes[0]})"
        terminalreporter.write_line(line)
