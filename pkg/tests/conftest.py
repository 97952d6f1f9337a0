def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines.extend(v for k, v in rep.user_properties if k == "criterion")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: _order(s.split()[1])):
            terminalreporter.write_line(line)


def _order(tag):
    digits = "".join(c for c in tag if c.isdigit())
    return int(digits or 0), tag
