"""Registry for the one-line-per-criterion acceptance summary."""

RESULTS = {}


def record(key, ok, detail=""):
    RESULTS[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
