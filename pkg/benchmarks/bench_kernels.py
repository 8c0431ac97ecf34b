"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--channels 64] [--seconds 600] [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from somno import _kernels_py
from somno.signal_core import antialias_taps

try:
    from somno import _kernels as _compiled
except ImportError:
    _compiled = None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--seconds", type=float, default=600.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rate, factor = 1000, 10
    taps = np.ascontiguousarray(antialias_taps(float(rate), factor))
    n = int(args.seconds * rate)
    n_out = n // factor
    rng = np.random.default_rng(0)
    padded = rng.standard_normal((args.channels, (n_out - 1) * factor + taps.shape[0]))
    x = rng.standard_normal((args.channels, min(n, 60_000)))

    backends = {"numpy": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    else:
        print("compiled extension not built; timing the fallback only")

    print(f"{args.channels} channels x {n} samples, {taps.shape[0]} taps, factor {factor}")
    results = {}
    for name, mod in backends.items():
        fir = min(timeit.repeat(lambda: mod.fir_decimate(padded, taps, factor, n_out),
                                number=1, repeat=args.repeat))
        pole = min(timeit.repeat(lambda: mod.onepole_lowpass(x, 0.99), number=1, repeat=args.repeat))
        results[name] = (fir, pole)
        print(f"{name:>7}  fir_decimate {fir:8.3f} s   onepole_lowpass ({x.shape[1]} samples) {pole:8.3f} s")

    if len(results) == 2:
        (nf, npole), (cf, cpole) = results["numpy"], results["cython"]
        print(f"speedup  fir_decimate x{nf / cf:.1f}   onepole_lowpass x{npole / cpole:.1f}")
        a = _compiled.fir_decimate(padded[:2], taps, factor, n_out)
        b = _kernels_py.fir_decimate(padded[:2], taps, factor, n_out)
        print(f"max |cython - numpy| on fir_decimate: {np.max(np.abs(np.asarray(a) - b)):.2e}")


if __name__ == "__main__":
    main()
