"""Compare the compiled sampler kernels with the pure-Python fallback.

Each backend runs in its own interpreter because the choice is made at
import time (``ISOMIX_DISABLE_JIT``). Reports seconds per 1,000 sweeps and
checks that both backends produce the same chain.

    python benchmarks/bench_kernels.py --consumers 9 60 --sweeps 200
"""
import argparse
import json
import os
import subprocess
import sys
import textwrap

WORKER = textwrap.dedent("""
    import json, sys, time
    import numpy as np
    from isomix import _jit, sampler
    from isomix.data import ConsumerDataset
    from isomix.model import ModelSpec, build_model
    from isomix.simulate import geese_summaries, simulate_consumers

    n, sweeps = int(sys.argv[1]), int(sys.argv[2])
    src, tef = geese_summaries()
    rng = np.random.default_rng(0)
    Y, _, _ = simulate_consumers(np.tile([0.15, 0.1, 0.15, 0.6], (n, 1)), src, tef, np.eye(2) * 0.3, rng)
    model = build_model(ConsumerDataset(Y, src.isotopes), src, tef, ModelSpec("1"))
    cfg = sampler.McmcConfig(chains=1, iterations=sweeps, burn_in=sweeps // 2, thin=1, seed=3)
    sampler.run(model, sampler.McmcConfig(chains=1, iterations=4, burn_in=2, thin=1, seed=3))  # compile
    t0 = time.perf_counter()
    d = sampler.run(model, cfg)
    dt = time.perf_counter() - t0
    print(json.dumps({"jit": _jit.USE_NUMBA, "seconds": dt, "last_deviance": float(d.deviance[0, -1])}))
""")


def run(flag, n, sweeps):
    env = dict(os.environ, ISOMIX_DISABLE_JIT=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(n), str(sweeps)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--consumers", type=int, nargs="+", default=[9, 60])
    ap.add_argument("--sweeps", type=int, default=200, help="sweeps per timing run")
    args = ap.parse_args(argv)
    print(f"{'consumers':>9}  {'numba s/1k':>11}  {'python s/1k':>12}  {'speed-up':>8}  same chain")
    for n in args.consumers:
        fast, slow = run("0", n, args.sweeps), run("1", n, args.sweeps)
        per_k = 1000.0 / args.sweeps
        same = abs(fast["last_deviance"] - slow["last_deviance"]) <= 1e-8 * abs(slow["last_deviance"])
        print(f"{n:9d}  {fast['seconds'] * per_k:11.3f}  {slow['seconds'] * per_k:12.2f}  "
              f"{slow['seconds'] / fast['seconds']:8.0f}  {same}")


if __name__ == "__main__":
    main()
