"""Compare the numba and pure-numpy kernels on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Checks that both paths agree before timing them.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from accentconv import _kernels


def _best(fn, repeat):
    fn()  # warm up (triggers numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    a = rng.integers(0, 40, size=60)
    b = rng.integers(0, 40, size=70)
    cost = rng.random((300, 320))
    frames = rng.standard_normal((400, 800))
    yield "levenshtein 60x70", lambda k: k.levenshtein_numba(a, b), lambda: _kernels.levenshtein_numpy(a, b)
    yield "dtw 300x320", lambda k: k.dtw_numba(cost), lambda: _kernels.dtw_numpy(cost)
    yield (
        "overlap_add 400x800/200",
        lambda k: k.overlap_add_numba(frames, 200, 200 * 399 + 800),
        lambda: _kernels.overlap_add_numpy(frames, 200, 200 * 399 + 800),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, nb_fn, np_fn in cases(rng):
        ref, got = np.asarray(np_fn()), np.asarray(nb_fn(_kernels))
        if not np.allclose(ref, got, rtol=1e-10, atol=1e-9):
            raise SystemExit(f"{name}: numba and numpy results differ")
        t_nb = _best(lambda: nb_fn(_kernels), args.repeat)
        t_np = _best(np_fn, args.repeat)
        print(f"{name:<26}{1e3 * t_nb:>10.3f}{1e3 * t_np:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
