"""Shared test utilities."""

from cliniseq import tensorcore as tc


def check_inplace(arr, analytic, f, h=1e-4):
    """grad_check of f() w.r.t. the array ``arr`` mutated in place, restored afterwards."""
    saved = arr.copy()

    def g(v):
        arr[...] = v
        return f()

    try:
        return tc.grad_check(g, saved, analytic, h=h)
    finally:
        arr[...] = saved


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager recording PASS/FAIL for an acceptance criterion."""

    def __init__(self, number, title):
        self.label = f"criterion {number}: {title}"
        self.details: list[str] = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} {self.label}" + (f" [{'; '.join(self.details)}]" if self.details else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False
