"""Grid reference values for penalized reflected BM on the half line.

Computes, without any particles, two exact descriptions of the T=1 law of
dX = -n min(X,0) dt + dB, X_0 = 0 (the penalized form of reflected BM on
D = [0, inf)):

  * the continuous-time law, by Crank-Nicolson on the Fokker-Planck
    equation with graded time steps out of the initial point mass;
  * the law of the dt-splitting scheme (Gaussian convolution followed by
    the exact decay map x -> e^{-n dt} x below the boundary), stepped on
    the same grid, together with its accumulated mean |K|.

For each the script reports E|K|_T (which equals E X_T here, since
E B_T = 0) against the reflected local time E L_1 = sqrt(2/pi), and the
W2 distance of the T-marginal to the folded normal.  The projected
chain also has a closed form: the discrete Skorokhod formula gives
|K|_T = max_k(-B_k) pathwise, so its exact mean is the Spitzer sum
sqrt(dt/2pi) sum_{j<=T/dt} j^{-1/2}, printed alongside as a cross-check.
These are the numbers the acceptance suite's marginal-law and local-time
checks are judged against; they are independent of the particle code
entirely.
"""

import argparse

import numpy as np
from scipy.linalg import solve_banded
from scipy import stats

HALF_NORMAL_MEAN = float(np.sqrt(2.0 / np.pi))


def w2_from_cdf(x: np.ndarray, cdf: np.ndarray, m: int = 200_000) -> float:
    """W2 between a gridded CDF and |N(0,1)| by quantile matching."""
    u = (np.arange(m) + 0.5) / m
    return float(np.sqrt(np.mean((np.interp(u, cdf, x)
                                  - stats.halfnorm.ppf(u)) ** 2)))


def w2_to_halfnorm(x: np.ndarray, p: np.ndarray, m: int = 200_000) -> float:
    """W2 between a gridded density and |N(0,1)| by quantile matching."""
    h = x[1] - x[0]
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * h)])
    return w2_from_cdf(x, cdf / cdf[-1], m)


def continuous_law(n: float, x: np.ndarray, horizon: float = 1.0):
    """Crank-Nicolson solve of p_t = p_xx/2 - (b p)_x, b = -n min(x,0)."""
    h = x[1] - x[0]
    m = x.size
    b = -n * np.minimum(x, 0.0)
    t0 = 1e-6
    p = np.exp(-x ** 2 / (2 * t0)) / np.sqrt(2 * np.pi * t0)
    p /= np.trapezoid(p, x)
    t = t0
    # graded steps: the layer forms on the n^{-1} time scale
    for dt, upto in ((1e-6, 1e-4), (1e-5, 1e-3), (1e-4, 1e-2),
                     (5e-4, horizon)):
        r = 0.5 * dt / h ** 2
        c = dt / (4 * h)
        lhs = np.zeros((3, m))
        lhs[0, 1:] = -0.5 * r + c * b[1:]
        lhs[1, :] = 1.0 + r
        lhs[2, :-1] = -0.5 * r - c * b[:-1]
        bu, bd, bl = 0.5 * r - c * b[1:], 1.0 - r, 0.5 * r + c * b[:-1]
        for _ in range(int(round((upto - t) / dt))):
            rhs = bd * p
            rhs[1:] += bl * p[:-1]
            rhs[:-1] += bu * p[1:]
            p = solve_banded((1, 1), lhs, rhs)
        t = upto
    p = np.maximum(p, 0.0)
    p /= np.trapezoid(p, x)
    return p


def scheme_law(alpha: float, x: np.ndarray, dt: float, horizon: float = 1.0):
    """Exact marginal CDF of one contraction scheme, plus its mean |K|.

    One step: convolve the CDF with the N(0, dt) density, then apply the
    decay map x -> alpha x below the boundary (an exact CDF resampling,
    F <- F(./alpha) on x < 0).  alpha = e^{-n dt} gives the splitting
    scheme; alpha = 0 is full projection, i.e. the reflected oracle.  The
    step's mean push is (1 - alpha) E[X^-] = (1 - alpha) int_{x<0} F.
    Working on the CDF keeps every integrand smooth; density grids lose
    O(h) per step at the boundary kink, which compounds over T/dt steps.
    """
    h = x[1] - x[0]
    half = int(np.ceil(6.0 * np.sqrt(dt) / h))
    ker = np.exp(-(np.arange(-half, half + 1) * h) ** 2 / (2 * dt))
    ker /= ker.sum()
    neg = x < 0.0
    le0 = x <= 0.0
    cdf = (x >= 0.0).astype(float)  # point mass at the boundary
    mean_k = 0.0
    for _ in range(int(round(horizon / dt))):
        padded = np.concatenate([np.zeros(half), cdf, np.ones(half)])
        cdf_q = np.convolve(padded, ker, mode="valid")
        mean_k += (1.0 - alpha) * np.trapezoid(cdf_q[le0], x[le0])
        cdf = cdf_q.copy()
        if alpha > 0.0:
            cdf[neg] = np.interp(x[neg] / alpha, x, cdf_q)
        else:
            cdf[neg] = 0.0
    return cdf, mean_k


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--penalty", type=int, nargs="+",
                    default=[8, 32, 128, 512])
    ap.add_argument("--dt", type=float, default=1e-3,
                    help="step of the splitting-scheme law")
    ap.add_argument("--hx", type=float, default=5e-4,
                    help="space step of the reference grids")
    args = ap.parse_args()

    x = np.arange(-1.5, 5.0 + args.hx / 2, args.hx)
    print(f"targets: E L_1 = sqrt(2/pi) = {HALF_NORMAL_MEAN:.5f}, W2 = 0")
    print("        scheme |  E K (cont)  deficit | W2 (cont) | "
          "E K (dt=%g)  deficit | W2 (dt)" % args.dt)
    for n in args.penalty:
        p = continuous_law(float(n), x)
        ek = np.trapezoid(x * p, x)
        w2 = w2_to_halfnorm(x, p)
        cdf_s, ek_s = scheme_law(float(np.exp(-n * args.dt)), x, args.dt)
        w2_s = w2_from_cdf(x, cdf_s)
        # E X from the CDF must reproduce mean |K| (X_T = B_T + |K|_T,
        # E B_T = 0); a visible gap means the grids are too coarse
        ex_s = (np.trapezoid(1.0 - cdf_s[x >= 0], x[x >= 0])
                - np.trapezoid(cdf_s[x < 0], x[x < 0]))
        print(f"splitting {n:4d} |     {ek:.5f}  {100 * (1 - ek / HALF_NORMAL_MEAN):+6.2f}%"
              f" |   {w2:.5f} |     {ek_s:.5f}  "
              f"{100 * (1 - ek_s / HALF_NORMAL_MEAN):+6.2f}% | {w2_s:.5f}"
              f"  (identity gap {ex_s - ek_s:+.1e})")
    cdf_r, ek_r = scheme_law(0.0, x, args.dt)
    w2_r = w2_from_cdf(x, cdf_r)
    # with alpha = 0 the projection leaves an atom at the boundary and the
    # per-step accumulator converges only O(h); report E K through the
    # stable E X integral instead, with the exact Spitzer sum alongside
    ex_r = (np.trapezoid(1.0 - cdf_r[x >= 0], x[x >= 0])
            - np.trapezoid(cdf_r[x < 0], x[x < 0]))
    n_steps = int(round(1.0 / args.dt))
    spitzer = float(np.sqrt(args.dt / (2.0 * np.pi))
                    * np.sum(1.0 / np.sqrt(np.arange(1, n_steps + 1))))
    print(f"     projected |     {HALF_NORMAL_MEAN:.5f}   +0.00%"
          f" |   0.00000 |     {ex_r:.5f}  "
          f"{100 * (1 - ex_r / HALF_NORMAL_MEAN):+6.2f}% | {w2_r:.5f}"
          f"  (Spitzer exact {spitzer:.5f}; accumulator {ek_r:.5f})")


if __name__ == "__main__":
    main()
