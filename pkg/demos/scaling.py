"""Measure how the two runtime paths scale with the channel count.

The inference path never builds an N x N matrix, so its time should grow
about linearly in N; the training step computes window correlations and
pair losses, so it should grow about quadratically.  Prints both timing
tables with their fitted log-log slopes (reduced repetitions: expect a
little jitter relative to the defaults used by the test suite).

    python3 demos/scaling.py
"""

import os

from chancorr.bench import repr_dim_doubling_ratio, run_bench
from chancorr.train import write_text_atomic

OUT_DIR = os.path.join(os.path.dirname(__file__), "out")


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    for mode, expectation in (("inference", "about linear"),
                              ("train-step", "about quadratic")):
        print(f"timing the {mode} path ({expectation} in N) ...")
        result = run_bench(mode, reps=5)
        for line in result.table().splitlines():
            print(f"  {line}")
        path = os.path.join(OUT_DIR, f"bench_{mode}.csv")
        write_text_atomic(path, result.table())
        print(f"wrote {path}\n")

    print("doubling the backbone representation width at fixed N = 64 ...")
    t1, t2, ratio = repr_dim_doubling_ratio(reps=10)
    print(f"  d=32: {t1 * 1e3:.2f} ms   d=64: {t2 * 1e3:.2f} ms   "
          f"ratio x{ratio:.2f} (projection work is quadratic in width)")


if __name__ == "__main__":
    main()
