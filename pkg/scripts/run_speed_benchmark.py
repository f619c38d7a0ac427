"""Wall-clock comparison of the four search modes on a large random gallery.

Run single-threaded for honest numbers, e.g.:

    OMP_NUM_THREADS=1 OPENBLAS_NUM_THREADS=1 MKL_NUM_THREADS=1 \\
        python scripts/run_speed_benchmark.py --gallery-size 5000
"""

import argparse
import sys

import numpy as np
import torch

from dualtok import (
    InferenceConfig,
    Modality,
    SampleFeatures,
    benchmark,
    build_index,
    queries_from_index,
)


def random_gallery(rng, n, modality, start, tokens, dim):
    out = []
    for i in range(n):
        out.append(SampleFeatures(
            start + i, modality,
            rng.normal(size=dim).astype(np.float32),
            rng.normal(size=(tokens, dim)).astype(np.float32)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--gallery-size", type=int, default=5000)
    ap.add_argument("--tokens", type=int, default=8)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--theta", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.set_num_threads(1)
    rng = np.random.default_rng(args.seed)
    n = args.gallery_size
    image_index = build_index(
        random_gallery(rng, n, Modality.IMAGE, 0, args.tokens, args.dim))
    text_index = build_index(
        random_gallery(rng, n, Modality.TEXT, n, args.tokens, args.dim))

    report = benchmark(
        image_index, text_index,
        queries_from_index(image_index, args.queries),
        queries_from_index(text_index, args.queries),
        InferenceConfig(k=args.k, theta=args.theta),
        ["global", "local", "mixed", "two-stage"], threads=1)
    print("\n".join(report.to_tsv_lines()))

    totals = {t.mode: t.total_seconds for t in report.timings}
    print(f"# local / two-stage speedup: "
          f"{totals['local'] / totals['two-stage']:.1f}x", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
