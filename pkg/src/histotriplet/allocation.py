"""Largest-remainder integer allocation.

Used wherever fractional quotas must become exact integer counts
(source/target splits, stratified portions) so totals never drift by
rounding.
"""

from __future__ import annotations

import math


def largest_remainder_allocation(quotas, total):
    """Return integer counts summing to `total`, one per quota.

    Each count starts at floor(quota); the remaining units go to the
    largest fractional remainders, ties broken by position for
    determinism.
    """
    floors = [math.floor(q) for q in quotas]
    remainders = [q - f for q, f in zip(quotas, floors)]
    leftover = total - sum(floors)
    if leftover < 0 or leftover > len(quotas):
        raise ValueError(
            f"total {total} is not reachable from quotas summing to {sum(quotas):g}"
        )
    order = sorted(range(len(quotas)), key=lambda i: (-remainders[i], i))
    counts = list(floors)
    for i in order[:leftover]:
        counts[i] += 1
    return counts
