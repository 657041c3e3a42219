"""Registry of acceptance-criterion outcomes, printed in the pytest summary."""

RESULTS = []


def report(number, name, ok, detail=""):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok
