"""Process-wide call counters, used to assert which pipeline stages ran."""
from collections import Counter

calls: Counter = Counter()


def reset() -> None:
    calls.clear()
