from bridge_acceptance_log import RESULTS


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not RESULTS:
        return
    terminalreporter.section("bridge conformance")
    for name, passed, detail in RESULTS:
        line = f"{'PASS' if passed else 'FAIL'} {name}"
        if detail:
            line += f" - {detail}"
        terminalreporter.write_line(line)
