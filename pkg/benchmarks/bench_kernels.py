"""Numba vs numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the forward/backward sweep on IEEE-33, the closed-form market loop
for the 24 default hours, the surrogate's prediction-and-slope call at the
four MG buses, and an end-to-end Case 1 run in a fresh process
with and without ``P2PGRID_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from p2pgrid import kernels
from p2pgrid import surrogate as sg
from p2pgrid.config import load_config


def best_of(fn, repeat):
    fn()  # warm-up (includes jit compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def fbs_inputs(cfg):
    net = cfg.network
    p, q = cfg.loads(18)
    kw = net.s_base * 1000.0
    return net, p / kw, q / kw


def market_inputs(cfg, hour):
    mgs = cfg.microgrids
    arr = lambda f: np.array([f(m) for m in mgs], dtype=float)
    m = cfg.market
    return (m.pi_init, m.xi, m.epsilon, m.k_max,
            arr(lambda s: s.alpha_at(hour)), arr(lambda s: s.beta_at(hour)), arr(lambda s: s.a),
            arr(lambda s: s.b), arr(lambda s: s.g_max), arr(lambda s: s.load_min),
            arr(lambda s: s.load_max), arr(lambda s: s.pv_at(hour)), arr(lambda s: s.bess.p_max),
            arr(lambda s: s.bess.soc_init), arr(lambda s: s.bess.soc_min),
            arr(lambda s: s.bess.soc_max), arr(lambda s: s.bess.eta_c),
            arr(lambda s: s.bess.eta_d), arr(lambda s: s.lambda_d), cfg.dt)


def case1_seconds(disable: bool) -> float:
    env = dict(os.environ)
    if disable:
        env["P2PGRID_DISABLE_NUMBA"] = "1"
    else:
        env.pop("P2PGRID_DISABLE_NUMBA", None)
    code = ("import time\nfrom p2pgrid.config import load_config\nfrom p2pgrid.harness import run_case\n"
            "c = load_config(); run_case(c, 1)\nt = time.perf_counter(); run_case(c, 1)\n"
            "print(time.perf_counter() - t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    cfg = load_config()
    net, p_d, q_d = fbs_inputs(cfg)
    A = kernels.path_matrix(net.parent_line_idx, net.line_from, net.line_to, net.n_buses)

    rows = []
    fbs_np = best_of(lambda: kernels.fbs_numpy(A, net.line_from, net.line_to, net.r, net.x,
                                               p_d, q_d, 1.0, 1e-12, 500), args.repeat)
    rows.append(("fbs (IEEE-33)", "numpy", fbs_np))
    if kernels.USE_NUMBA:
        t = best_of(lambda: kernels.fbs_loops(net.order, net.parent_line_idx, net.line_from, net.r,
                                              net.x, p_d, q_d, 1.0, 1e-12, 500), args.repeat)
        rows.append(("fbs (IEEE-33)", "numba", t))

    hours = [market_inputs(cfg, h) for h in range(cfg.hours)]

    def day(fn):
        return lambda: [fn(*h) for h in hours]

    rows.append(("market, 24 h", "numpy", best_of(day(kernels.clear_kkt_numpy), max(1, args.repeat // 4))))
    if kernels.USE_NUMBA:
        rows.append(("market, 24 h", "numba", best_of(day(kernels.clear_kkt_loops), args.repeat)))

    model = sg.SurrogateModel.init(cfg.model_shape, seed=0)
    p_load, _ = cfg.loads(18)
    X = np.zeros((net.n_buses, 5))
    X[:, 1], X[:, 2], X[:, 3], X[:, 4] = p_load, cfg.power_factor, cfg.dopf.c_ls, cfg.dopf.lambda_corr
    X[cfg.mg_index, 0] = [700.0, -600.0, 650.0, -550.0]
    idx = np.asarray(cfg.mg_index, dtype=np.int64)
    rows.append(("encoder slopes", "numpy", best_of(lambda: sg._slopes_numpy(model, X, idx), args.repeat)))
    if kernels.USE_NUMBA:
        packed = sg.pack(model)
        rows.append(("encoder slopes", "numba",
                     best_of(lambda: sg.predict_and_slopes(model, X, idx, packed), args.repeat)))

    print(f"{'kernel':<16}{'backend':<10}{'seconds':>12}")
    for name, backend, t in rows:
        print(f"{name:<16}{backend:<10}{t:>12.6f}")
    by = {(n, b): t for n, b, t in rows}
    for name in ("fbs (IEEE-33)", "market, 24 h", "encoder slopes"):
        if (name, "numba") in by:
            print(f"{name}: numba speed-up x{by[(name, 'numpy')] / by[(name, 'numba')]:.1f}")
    if not args.skip_e2e:
        on, off = case1_seconds(False), case1_seconds(True)
        print(f"case 1 end to end: numba {on:.3f} s, numpy {off:.3f} s")


if __name__ == "__main__":
    main()
