"""Time each hot kernel on its numpy and numba paths, plus one training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N wall time and the numpy/numba ratio.
The training-step comparison runs in subprocesses because the backend is fixed
at import time through STSUN_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stsun import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from stsun.data import SyntheticSpec, generate_synthetic
from stsun.model import ModelConfig, STSUN
from stsun.training import TrainPlan, TrainSet, train
d = generate_synthetic(SyntheticSpec(task="SCD", T1=2, n_train=16, n_val=0, n_test=0))
cfg = ModelConfig(H=16, W=16, T=2, C_e=4, C_a=4, heads=2, hyper_heads=2, hyper_depth=1,
                  encoder_depth=1, decoder_depth=1, categories=("change", "background", "building", "water"))
m = STSUN(cfg)
train(m, [TrainSet("w", d["train"])], TrainPlan(lr=1e-3, max_steps=1, augment=False))  # warm-up / jit
r = train(m, [TrainSet("w", d["train"])], TrainPlan(lr=1e-3, max_steps=6, augment=False))
print(r.seconds / r.steps)
"""


def cases(rng):
    x = rng.standard_normal((16384, 256))
    g = rng.standard_normal(x.shape)
    y = K.softmax_rows_numpy(x)
    ln_x = rng.standard_normal((32768, 64))
    gamma, beta = rng.standard_normal(64), rng.standard_normal(64)
    _, xhat, rstd = K.layernorm_rows_numpy(ln_x, gamma, beta, 1e-5)
    flat = rng.standard_normal(2_000_000)
    rows = rng.standard_normal((16, 256, 64))
    idx = rng.integers(0, 256, 1024)
    w = rng.random(1024)
    gathered = rng.standard_normal((16, 1024, 64))
    return {
        "softmax_rows": lambda b: b["softmax_rows"](x),
        "softmax_rows_grad": lambda b: b["softmax_rows_grad"](y, g),
        "layernorm_rows": lambda b: b["layernorm_rows"](ln_x, gamma, beta, 1e-5),
        "layernorm_rows_grad": lambda b: b["layernorm_rows_grad"](ln_x, xhat, rstd, gamma),
        "gelu": lambda b: b["gelu"](flat),
        "gelu_grad": lambda b: b["gelu_grad"](flat, flat),
        "gather_rows": lambda b: b["gather_rows"](rows, idx),
        "scatter_rows": lambda b: b["scatter_rows"](gathered, idx, w, 256),
    }


def backend(suffix):
    return {name: getattr(K, f"{name}_{suffix}") for name in
            ("softmax_rows", "softmax_rows_grad", "layernorm_rows", "layernorm_rows_grad",
             "gelu", "gelu_grad", "gather_rows", "scatter_rows")}


def step_time(use_numba: bool) -> float:
    env = dict(os.environ, STSUN_NUMBA="1" if use_numba else "0", STSUN_THREADS="1")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training-step timing")
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    numpy_b, numba_b = backend("numpy"), backend("numba")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'ratio':>8}")
    for name, fn in cases(rng).items():
        fn(numba_b)  # compile outside the timing
        tn = min(timeit.repeat(lambda: fn(numpy_b), number=1, repeat=args.repeat))
        tb = min(timeit.repeat(lambda: fn(numba_b), number=1, repeat=args.repeat))
        print(f"{name:<22}{tn * 1e3:>10.2f}{tb * 1e3:>10.2f}{tn / tb:>8.2f}")
    if not args.no_step:
        sn, sb = step_time(False), step_time(True)
        print(f"{'training step':<22}{sn * 1e3:>10.1f}{sb * 1e3:>10.1f}{sn / sb:>8.2f}")


if __name__ == "__main__":
    main()
