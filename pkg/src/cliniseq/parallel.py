import os

ENV_VAR = "CLINISEQ_THREADS"


def worker_count() -> int:
    """Worker cap from CLINISEQ_THREADS, defaulting to the available cores."""
    raw = os.environ.get(ENV_VAR)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
