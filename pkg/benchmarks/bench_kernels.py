"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mimic one ML-100k training minibatch (256 users, 1349 items, 256
hidden units) and one evaluation pass (941 users x 101 candidates).
"""

import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from bdecf import kernels


def make_inputs(rng):
    R = sp.random(941, 1349, density=0.078, format="csr", random_state=1, dtype=np.float32)
    R.indices = R.indices.astype(np.int64)
    R.indptr = R.indptr.astype(np.int64)
    rows = rng.integers(0, 941, 256).astype(np.int64)
    exclude = rng.integers(0, 1349, 256).astype(np.int64)
    W = rng.standard_normal((1349, 256)).astype(np.float32)
    G = rng.standard_normal((256, 256)).astype(np.float32)
    Q, K, V = (rng.standard_normal((256, 4, 8, 2)).astype(np.float32) for _ in range(3))
    scores = rng.random((941, 101))
    ids = np.argsort(rng.random((941, 101)), axis=1).astype(np.int64)
    return R, rows, exclude, W, G, Q, K, V, scores, ids


def cases(mod, inp):
    R, rows, exclude, W, G, Q, K, V, scores, ids = inp
    out, probs = mod.attention_forward(Q, K, V)
    gW = np.zeros_like(W)
    return {
        "sparse_rows_matmul": lambda: mod.sparse_rows_matmul(R.indptr, R.indices, R.data, rows, exclude, W),
        "sparse_rows_matmul_grad": lambda: mod.sparse_rows_matmul_grad(
            R.indptr, R.indices, R.data, rows, exclude, G, gW),
        "attention_forward": lambda: mod.attention_forward(Q, K, V),
        "attention_backward": lambda: mod.attention_backward(out, probs, Q, K, V),
        "target_ranks": lambda: mod.target_ranks(scores, ids),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    inp = make_inputs(np.random.default_rng(0))
    compiled = kernels.compiled()
    if compiled is None:
        print("compiled extension not built; only the python backend is timed")
    py_cases = cases(kernels.py, inp)
    c_cases = cases(compiled, inp) if compiled else {}
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in py_cases.items():
        t_py = min(timeit.repeat(fn, repeat=args.repeat, number=args.number)) / args.number * 1e3
        if name in c_cases:
            t_c = min(timeit.repeat(c_cases[name], repeat=args.repeat, number=args.number)) / args.number * 1e3
            print(f"{name:<26}{t_py:>12.3f}{t_c:>12.3f}{t_py / t_c:>9.1f}x")
        else:
            print(f"{name:<26}{t_py:>12.3f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
