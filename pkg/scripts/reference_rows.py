"""Reproduce the published cost, latency and objective reference rows from the cost model.

    python scripts/reference_rows.py
"""
from eedet.reference import reference_checks


def main():
    failed = 0
    for c in reference_checks():
        status = "PASS" if c["passed"] else "FAIL"
        failed += not c["passed"]
        if "error" in c:
            print(f"{status} {c['name']:24s} value {c['value']:.6g} target {c['target']:.6g} err {c['error']:.4f}")
        else:
            print(f"{status} {c['name']:24s} {c['value']}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
