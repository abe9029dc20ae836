"""Independent brute-force labeling, written without touching the library's helpers.

It walks every timestamp of every track, keeps the ones inside the segment,
and sums them by hand. Used as the oracle for segment means, labels and the
average viewer.
"""

PERIOD = 40


def brute_mean(values, start, end, period=PERIOD):
    total, count = 0.0, 0
    for i, v in enumerate(values):
        t = i * period
        if start <= t < end:
            total += v
            count += 1
    if count == 0:
        return None
    return total / count


def brute_label(x):
    # strictly above zero is positive; zero itself is negative
    return 1 if x > 0 else 0


def brute_sample(tracks, start, end, period=PERIOD):
    """(per-viewer means or None, labels, average mean, average label)."""
    means = [None if tr is None else brute_mean(tr, start, end, period) for tr in tracks]
    present = [m for m in means if m is not None]
    avg = sum(present) / len(present)
    labels = [0 if m is None else brute_label(m) for m in means]
    return means, labels, avg, brute_label(avg)


# 20 micro-tracks: (tracks per viewer, None for an absent viewer), segment [start, end) in ms
MICRO_CASES = [
    ([[0.2, 0.4]], 0, 80),
    ([[0.5, -0.5, 0.7]], 40, 80),
    ([[0.0, 0.0, 0.0]], 0, 120),
    ([[0.1, -0.1]], 0, 80),
    ([[0.1, -0.1], [-0.3, 0.3]], 0, 80),
    ([[1.0, 1.0, -1.0, -1.0]], 0, 160),
    ([[0.3, 0.3, 0.3, 0.3]], 10, 90),
    ([[0.9, -0.8, 0.1, 0.2, -0.4]], 41, 161),
    ([[0.25, 0.25], [0.5, -0.5], [-1.0, 1.0]], 0, 80),
    ([[0.2, 0.2, 0.2], None, [-0.6, -0.6, -0.6]], 0, 120),
    ([None, [0.05, -0.05, 0.01]], 0, 120),
    ([[-0.2, -0.2], [0.2, 0.2]], 0, 80),
    ([[0.6, 0.1, -0.2, 0.4, 0.0, -0.9]], 80, 200),
    ([[0.001]], 0, 1),
    ([[-0.001]], 0, 40),
    ([[0.3, -0.3, 0.3, -0.3, 0.3, -0.3, 0.3, -0.3]], 0, 320),
    ([[0.3, -0.3, 0.3, -0.3, 0.3, -0.3, 0.3, -0.3]], 0, 280),
    ([[0.7, 0.7, 0.7], [0.7, 0.7, 0.7], [0.7, 0.7, 0.7], [-0.7, -0.7, -0.7]], 0, 120),
    ([[0.5, 0.4, 0.3, 0.2, 0.1], [-0.1, -0.2, -0.3, -0.4, -0.5]], 39, 200),
    ([[0.12, 0.34, 0.56], [0.78, -0.9, 0.11], None, [-0.33, 0.0, 0.99]], 40, 120),
]
