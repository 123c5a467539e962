import pytest

_VERDICTS = pytest.StashKey[dict]()


class Verdict:
    """Named sub-checks for one acceptance criterion; ``require`` asserts them all."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.checks: list[tuple[str, bool, str]] = []
        self.notes: list[str] = []
        self.completed = False

    def check(self, label: str, ok, detail: str = "") -> bool:
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def passed(self) -> bool:
        return self.completed and all(ok for _, ok, _ in self.checks)

    def require(self) -> None:
        self.completed = True
        failed = [f"{label} ({detail})" if detail else label for label, ok, detail in self.checks if not ok]
        assert not failed, f"criterion {self.number} failed: " + "; ".join(failed)

    def line(self) -> str:
        parts = [f"{label}{' ' + detail if detail else ''}{'' if ok else ' [FAIL]'}"
                 for label, ok, detail in self.checks]
        if not self.completed:
            parts.append("did not complete")
        text = f"{'PASS' if self.passed else 'FAIL'}  {self.number:>2}. {self.title}: " + "; ".join(parts)
        return text + "".join(f"\n          info: {n}" for n in self.notes)


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def criterion(request):
    def make(number: int, title: str) -> Verdict:
        v = Verdict(number, title)
        request.config.stash[_VERDICTS][number] = v
        return v
    return make


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n].line())
    passed = sum(v.passed for v in verdicts.values())
    terminalreporter.write_line(f"{passed}/{len(verdicts)} criteria pass")
