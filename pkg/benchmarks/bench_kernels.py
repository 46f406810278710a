"""Compare the compiled kernels against the numpy fallback.

Times one local-training epoch of the desk-scale MLP and one forward plus
backward pass of the attacker LSTM, at the shapes the pipeline uses.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import timeit

import numpy as np

from fedldi.numerics import backend
from fedldi.numerics.lstm import init_lstm_blocks
from fedldi.numerics.mlp import init_mlp


def mlp_case(n=2000, batch=32):
    gen = np.random.default_rng(0)
    model = init_mlp((32, 32, 10), rng=0)
    X = gen.normal(size=(n, 32))
    y = gen.integers(0, 10, n)
    order = gen.permutation(n)
    dims = np.array(model.dims, dtype=np.int64)

    def run(kern):
        kern.mlp_sgd_epoch(model.params.values.copy(), dims, model.act_codes, X, y, order, batch, 0.05)
    return run


def lstm_case(batch=8, rounds=30, n_in=10, hidden=64):
    gen = np.random.default_rng(1)
    blk = init_lstm_blocks(n_in, hidden, 0)
    X = np.ascontiguousarray(gen.uniform(size=(rounds, batch, n_in)))
    dH = gen.normal(size=(rounds, batch, hidden))
    Wx, Wh, b = (np.ascontiguousarray(blk[k]) for k in ("Wx", "Wh", "b"))

    def run(kern):
        Hs, Cs, G = kern.lstm_seq_forward(X, Wx, Wh, b)
        kern.lstm_seq_backward(X, Wx, Wh, Hs, Cs, G, dH)
    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    names = backend.available()
    if "cython" not in names:
        print("compiled kernels not built; only the fallback is timed")
    cases = {"mlp epoch (2000 x 32, batch 32)": mlp_case(),
             "lstm fwd+bwd (E=30, B=8, H=64)": lstm_case()}
    print(f"{'kernel':34s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, run in cases.items():
        times = []
        for name in names:
            kern = backend.get(name)
            run(kern)  # warm up
            times.append(min(timeit.repeat(lambda: run(kern), number=1, repeat=args.repeats)))
        row = f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
