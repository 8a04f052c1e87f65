"""Compare the compiled and pure-Python kernels on large inputs.

    python3 benchmarks/bench_kernels.py [--rows 5000] [--lookups 2000]
"""

import argparse
import random
import timeit

from honeydoc import _kernels_py as pure

try:
    from honeydoc import _kernels as compiled
except ImportError:
    compiled = None


def make_table(rng, n):
    rows = []
    for _ in range(n):
        mask = rng.randrange(64)
        rows.append((mask, rng.randint(1, 8), rng.choice([6, 17]), rng.getrandbits(32),
                     rng.getrandbits(32), rng.randint(1, 65535), rng.randint(1, 65535)))
    return rows


def make_keys(rng, n):
    return [(rng.randint(1, 8), rng.choice([6, 17]), rng.getrandbits(32), rng.getrandbits(32),
             rng.randint(1, 65535), rng.randint(1, 65535)) for _ in range(n)]


def bench(mod, rows, keys, times, contents, repeat):
    packed = mod.pack_rows(rows)
    out = {}
    out["match_first"] = min(timeit.repeat(
        lambda: [mod.match_first(packed, k) for k in keys], number=1, repeat=repeat))
    out["first_rule_match"] = min(timeit.repeat(
        lambda: [mod.first_rule_match(packed, contents, k, b"payload") for k in keys],
        number=1, repeat=repeat))
    out["bin_counts"] = min(timeit.repeat(
        lambda: mod.bin_counts(times, 100_000), number=1, repeat=repeat))
    out["seq_add"] = min(timeit.repeat(
        lambda: [mod.seq_add(t, -7) for t in times], number=1, repeat=repeat))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=5000)
    ap.add_argument("--lookups", type=int, default=2000)
    ap.add_argument("--events", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = random.Random(args.seed)
    # mostly-constrained rows so lookups scan deep into the table
    rows = [(r[0] | 0b111100,) + r[1:] for r in make_table(rng, args.rows)]
    keys = make_keys(rng, args.lookups)
    times = [rng.randrange(60_000_000) for _ in range(args.events)]
    contents = [rng.choice([None, b"USER", b"SSH-"]) for _ in rows]

    results = {"python": bench(pure, rows, keys, times, contents, args.repeat)}
    if compiled is not None:
        results["cython"] = bench(compiled, rows, keys, times, contents, args.repeat)
        a = [pure.match_first(pure.pack_rows(rows), k) for k in keys[:50]]
        b = [compiled.match_first(compiled.pack_rows(rows), k) for k in keys[:50]]
        assert a == b, "backends disagree"
    else:
        print("compiled extension not built; timing the pure-Python backend only")

    print(f"rows={args.rows} lookups={args.lookups} events={args.events}")
    print(f"{'kernel':<18}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, t_py in results["python"].items():
        t_cy = results.get("cython", {}).get(name)
        if t_cy is None:
            print(f"{name:<18}{t_py:>12.4f}{'-':>12}{'-':>10}")
        else:
            print(f"{name:<18}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
