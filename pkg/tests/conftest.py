# one "PASS|FAIL <id> ..." line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []
_config = None


def pytest_configure(config):
    global _config
    _config = config


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    capman = _config.pluginmanager.getplugin("capturemanager") if _config else None
    if capman is None:
        print(line)
        return
    with capman.global_and_fixture_disabled():  # show the verdict live despite output capture
        print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
