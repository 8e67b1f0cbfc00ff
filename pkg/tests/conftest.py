import sys
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> title, and the outcome of every test tagged with it
_titles: dict[int, str] = {}
_outcomes: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _titles[number] = title
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        passed = call.excinfo is None
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if not passed and not detail:
            detail = call.excinfo.exconly().splitlines()[0][:160]
        _outcomes[number].append((item.name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        ok = all(passed for _, passed, _ in results)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {_titles[number]}")
        for name, passed, detail in results:
            if detail or not passed:
                terminalreporter.write_line(f"        {'ok  ' if passed else 'fail'} {name}: {detail}")
