import pytest

_LINES: dict[str, str] = {}


class _Recorder:
    def __call__(self, cid: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}"
        _LINES[cid] = line
        print(line)
        return ok


@pytest.fixture(scope="session")
def criterion():
    return _Recorder()


def _order(cid):
    num = "".join(ch for ch in cid if ch.isdigit())
    return int(num or 0), cid


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(_LINES, key=_order):
        terminalreporter.write_line(_LINES[cid])
