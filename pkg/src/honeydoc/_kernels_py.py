"""Pure-Python hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, or when
``HONEYDOC_PURE=1`` is set. Both backends expose the same functions and
must agree exactly; ``tests/test_kernels.py`` runs them side by side.

Packed rows are tuples of ``HEADER_WIDTH`` ints: a wildcard bitmask
followed by the constrained values (in_port, proto, src_ip, dst_ip,
src_port, dst_port). Bit ``i`` set in the mask means field ``i`` is
constrained.
"""

MOD32 = 1 << 32
HEADER_WIDTH = 7

BACKEND = "python"


def seq_add(base, delta):
    return (base + delta) % MOD32


def pack_rows(rows):
    return [tuple(r) for r in rows]


def match_first(packed, key):
    """Index of the first row matching ``key`` (6 header ints), or -1."""
    for idx, row in enumerate(packed):
        mask = row[0]
        if mask & 1 and row[1] != key[0]:
            continue
        if mask & 2 and row[2] != key[1]:
            continue
        if mask & 4 and row[3] != key[2]:
            continue
        if mask & 8 and row[4] != key[3]:
            continue
        if mask & 16 and row[5] != key[4]:
            continue
        if mask & 32 and row[6] != key[5]:
            continue
        return idx
    return -1


def first_rule_match(packed, contents, key, payload):
    """Index of the first rule whose header matches and whose content,
    if any, occurs in ``payload``. Rows must already be in precedence order.
    """
    start = 0
    n = len(packed)
    while start < n:
        idx = match_first(packed[start:], key)
        if idx < 0:
            return -1
        idx += start
        content = contents[idx]
        if content is None or content in payload:
            return idx
        start = idx + 1
    return -1


def bin_counts(times_us, bin_us):
    """Histogram of event times; returns ``{bin_index: count}``."""
    counts = {}
    for t in times_us:
        b = t // bin_us
        counts[b] = counts.get(b, 0) + 1
    return counts
