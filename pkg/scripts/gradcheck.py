"""Finite-difference suite with per-case output; exits 1 on any failure."""

import sys

from promptcl.gradcheck import run_gradcheck

if __name__ == "__main__":
    res = run_gradcheck()
    print("\n".join(res.lines()))
    print(f"{sum(c.passed for c in res.cases)}/{len(res.cases)} passed in {res.seconds:.1f}s")
    sys.exit(0 if res.passed else 1)
