import gate


def pytest_terminal_summary(terminalreporter):
    if gate.RESULTS:
        terminalreporter.section("acceptance gate")
        for line in gate.RESULTS:
            terminalreporter.write_line(line)
