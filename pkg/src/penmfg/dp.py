"""Grid dynamic programming for the best response under a frozen flow.

The controlled diffusion is approximated by a locally consistent Markov chain
on a uniform box grid (d <= 2), following the classic upwind construction:
axis neighbors carry the diagonal diffusion and the upwinded drift, corner
neighbors carry cross covariances, and the remainder stays put.  One-step
mean and covariance then match b dt and sigma sigma^T dt up to O(hx dt).

Two boundary regimes:

* reflected mode (no penalty): the grid box is the domain closure; mass that
  would leave through a face lying on the domain boundary is redirected to
  the projected node and charged h per unit displacement, mirroring the
  h d|K| cost.  Faces interior to an unbounded domain are pure truncation:
  redirected without charge and counted.
* penalized mode: the box extends past the domain by a margin sized to the
  penalty excursion scale; coefficients use the penalized drift and running
  cost, and only the outer box edge truncates (counted, never charged).

The transition probabilities are nonnegative by construction provided the
covariance is diagonally dominant; the remaining stability constraint on
dt/hx^2 is met by splitting each control interval into equal substeps during
which the control and coefficients stay frozen, instead of silently changing
the caller's grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import model as model_mod
from .controls import RelaxedFeedback, StrictFeedback
from .errors import ConfigError, GridError
from .measures import EmpiricalMeasure, MeasureFlow, format_float
from .model import ModelSpec, penalized_running_cost, validate_penalty
from .simulate import SimConfig, evaluate_cost, simulate

MAX_SUBSTEPS = 64
PROB_TOL = 1e-12

# margin multipliers for the penalized state box: diffusive excursions scale
# like sigma sqrt(dt) per step and the stationary overshoot like sigma/sqrt(2n)
MARGIN_DIFFUSIVE = 3.0
MARGIN_PENALTY = 5.0


# -------------------------------------------------------------------- grid


@dataclass(frozen=True, eq=False)
class DPGrid:
    """Uniform node grid on a box, equal spacing on every axis."""

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple  # nodes per axis, >= 2 each

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        shape = tuple(int(s) for s in np.atleast_1d(self.shape))
        if lo.shape != hi.shape or lo.ndim != 1 or not np.all(lo < hi):
            raise GridError("grid needs lower < upper per axis")
        if lo.size > 2:
            raise GridError(f"grid DP supports d <= 2, got d = {lo.size}")
        if len(shape) != lo.size or any(s < 2 for s in shape):
            raise GridError("need at least 2 nodes per axis")
        spacings = (hi - lo) / (np.asarray(shape) - 1)
        if np.max(spacings) - np.min(spacings) > 1e-9 * np.max(spacings):
            raise GridError(
                f"axis spacings differ: {spacings}; use equal hx on every axis"
            )
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def regular(cls, lower, upper, hx: float) -> "DPGrid":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if hx <= 0:
            raise GridError("hx must be positive")
        cells = np.round((hi - lo) / hx).astype(int)
        if np.any(cells < 1):
            raise GridError(f"box {lo}..{hi} is narrower than hx={hx}")
        if np.max(np.abs(cells * hx - (hi - lo))) > 1e-9 * max(1.0, hx):
            raise GridError(
                f"hx={hx} does not tile the box {lo}..{hi} evenly"
            )
        return cls(lo, hi, tuple(int(c) + 1 for c in cells))

    @classmethod
    def for_model(cls, ms: ModelSpec, hx: float, dt: float,
                  penalty: Optional[int] = None,
                  bounds: Optional[tuple] = None) -> "DPGrid":
        """Grid over the domain's bounding box, padded in penalized mode.

        Unbounded domains need explicit ``bounds``.  The penalty margin is
        rounded up to whole cells so domain-boundary nodes stay on-grid.
        """
        if bounds is not None:
            lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in bounds)
        elif ms.dom.kind == "box":
            lo, hi = ms.dom.lower.copy(), ms.dom.upper.copy()
        elif ms.dom.kind == "ball":
            lo = ms.dom.center - ms.dom.radius
            hi = ms.dom.center + ms.dom.radius
        else:
            raise GridError(
                f"domain kind {ms.dom.kind!r} is unbounded or not box-aligned;"
                " pass explicit grid bounds"
            )
        if penalty is not None:
            margin = penalty_margin(_sigma_scale(ms, lo, hi), dt,
                                    validate_penalty(penalty))
            cells = int(np.ceil(margin / hx - 1e-12))
            lo = lo - cells * hx
            hi = hi + cells * hx
        return cls.regular(lo, hi, hx)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def hx(self) -> float:
        return float((self.upper[0] - self.lower[0]) / (self.shape[0] - 1))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list:
        return [np.linspace(self.lower[j], self.upper[j], self.shape[j])
                for j in range(self.dim)]

    def nodes(self) -> np.ndarray:
        """All node coordinates, (n_nodes, d), row-major in the multi-index."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nearest_node(self, x: np.ndarray) -> np.ndarray:
        """Raveled index of the closest node, clamping outside points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.round((x - self.lower) / self.hx).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)


def penalty_margin(sigma_bar: float, dt: float, penalty: int) -> float:
    """Box padding for penalized DP: covers the typical outward excursion."""
    return max(MARGIN_DIFFUSIVE * sigma_bar * np.sqrt(dt),
               MARGIN_PENALTY * sigma_bar / np.sqrt(2.0 * penalty))


def pad_for_penalty(grid: DPGrid, ms: ModelSpec, dt: float,
                    penalty: int) -> DPGrid:
    """Extend a domain-fitting grid by the penalty margin, whole cells.

    Lets one base grid serve both modes: reflected solves use it as is,
    penalized solves pad it here, keeping node alignment and spacing.
    """
    margin = penalty_margin(_sigma_scale(ms, grid.lower, grid.upper), dt,
                            validate_penalty(penalty))
    cells = int(np.ceil(margin / grid.hx - 1e-12))
    return DPGrid.regular(grid.lower - cells * grid.hx,
                          grid.upper + cells * grid.hx, grid.hx)


def _sigma_scale(ms: ModelSpec, lo: np.ndarray, hi: np.ndarray) -> float:
    """Spectral-norm estimate of sigma at the box center, first control."""
    x = (0.5 * (lo + hi))[None, :]
    mu = EmpiricalMeasure(x)
    u = ms.control_grid()[:1]
    sig = np.asarray(ms.diffusion(0.0, x, mu, u), dtype=float)[0]
    return float(np.linalg.norm(sig, 2))


# ------------------------------------------------------------- chain build


def _stencil_offsets(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[0], [-1], [1]])
    return np.array([
        [0, 0], [-1, 0], [1, 0], [0, -1], [0, 1],
        [1, 1], [-1, -1], [1, -1], [-1, 1],
    ])


@dataclass(eq=False)
class _Geometry:
    """Static redirect geometry: targets, charged and truncated overflow."""

    idx: np.ndarray         # (n_nodes, n_st) redirected target nodes
    charged_disp: np.ndarray  # (n_nodes, n_st, d) outward displacement, charged axes
    truncated: np.ndarray   # (n_nodes, n_st) bool, uncharged overflow happened


def _face_is_boundary(grid: DPGrid, dom, axis: int, side: int) -> bool:
    """Whether a grid face lies on the domain boundary (else it truncates)."""
    probe = 0.5 * (grid.lower + grid.upper)
    probe = probe.copy()
    probe[axis] = grid.upper[axis] if side > 0 else grid.lower[axis]
    probe[axis] += side * 0.5 * grid.hx
    return not bool(dom.contains(probe[None, :])[0])


def _build_geometry(grid: DPGrid, dom, penalized: bool) -> _Geometry:
    offsets = _stencil_offsets(grid.dim)
    multi = np.stack(
        np.unravel_index(np.arange(grid.n_nodes), grid.shape), axis=1
    )
    shape = np.asarray(grid.shape)
    if penalized:
        charged = np.zeros((grid.dim, 2), dtype=bool)
    else:
        charged = np.array([
            [_face_is_boundary(grid, dom, ax, -1),
             _face_is_boundary(grid, dom, ax, +1)]
            for ax in range(grid.dim)
        ])
    n_st = offsets.shape[0]
    idx = np.empty((grid.n_nodes, n_st), dtype=np.int64)
    disp = np.zeros((grid.n_nodes, n_st, grid.dim))
    trunc = np.zeros((grid.n_nodes, n_st), dtype=bool)
    for s, off in enumerate(offsets):
        tgt = multi + off
        clipped = np.clip(tgt, 0, shape - 1)
        idx[:, s] = np.ravel_multi_index(tuple(clipped.T), grid.shape)
        over = tgt - clipped  # -1, 0, +1 per axis
        for ax in range(grid.dim):
            lo_over = over[:, ax] < 0
            hi_over = over[:, ax] > 0
            if charged[ax, 0]:
                disp[lo_over, s, ax] = -grid.hx
            else:
                trunc[:, s] |= lo_over
            if charged[ax, 1]:
                disp[hi_over, s, ax] = grid.hx
            else:
                trunc[:, s] |= hi_over
    return _Geometry(idx=idx, charged_disp=disp, truncated=trunc)


@dataclass(eq=False)
class TransitionModel:
    """Locally consistent chain for every (time slice, control).

    ``probs[k]`` has shape (nU, n_nodes, n_stencil) and rows summing to one;
    ``charge[k]`` is the expected per-substep boundary cost; ``run_cost[k]``
    the running cost (penalized surcharge included) at the slice; ``substeps``
    the per-slice substep count that makes the stay probability nonnegative.
    """

    grid: DPGrid
    times: np.ndarray
    penalty: Optional[int]
    geometry: _Geometry = dc_field(repr=False, default=None)
    probs: list = dc_field(repr=False, default=None)
    charge: list = dc_field(repr=False, default=None)
    run_cost: list = dc_field(repr=False, default=None)
    terminal: np.ndarray = dc_field(repr=False, default=None)
    substeps: np.ndarray = None
    truncated_mass: float = 0.0

    @property
    def n_slices(self) -> int:
        return len(self.probs)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def _slice_rows(ms: ModelSpec, penalty, grid: DPGrid, geo: _Geometry,
                nodes: np.ndarray, t: float, mu, dt: float):
    """Probability rows, charges and costs for one time slice.

    Returns (probs (nU, n_nodes, n_st), charge, f, substeps, trunc_mass).
    """
    atoms = ms.control_grid()
    n_nodes, d = nodes.shape
    hx = grid.hx
    n_st = geo.idx.shape[1]
    coeff = np.zeros((atoms.shape[0], n_nodes, n_st))
    fvals = np.empty((atoms.shape[0], n_nodes))
    hval = np.asarray(ms.boundary_cost(t, nodes, mu), dtype=float)
    worst = 0.0
    for ui, atom in enumerate(atoms):
        u = np.broadcast_to(atom, (n_nodes, atoms.shape[1]))
        if penalty is not None:
            b = model_mod.penalized_drift(ms, penalty, t, nodes, mu, u)
            fvals[ui] = penalized_running_cost(ms, penalty, t, nodes, mu, u)
        else:
            b = np.asarray(ms.drift(t, nodes, mu, u), dtype=float)
            fvals[ui] = np.asarray(ms.running_cost(t, nodes, mu, u), dtype=float)
        sig = np.asarray(ms.diffusion(t, nodes, mu, u), dtype=float)
        a = np.einsum("bim,bjm->bij", sig, sig)
        bp = np.maximum(b, 0.0)
        bm = np.maximum(-b, 0.0)
        if d == 1:
            a00 = a[:, 0, 0]
            coeff[ui, :, 1] = a00 / 2.0 + hx * bm[:, 0]
            coeff[ui, :, 2] = a00 / 2.0 + hx * bp[:, 0]
        else:
            cross = a[:, 0, 1]
            slack0 = a[:, 0, 0] - np.abs(cross)
            slack1 = a[:, 1, 1] - np.abs(cross)
            bad = np.minimum(slack0, slack1)
            if np.min(bad) < -PROB_TOL * max(1.0, float(np.max(np.abs(a)))):
                node = int(np.argmin(bad))
                raise GridError(
                    "covariance is not diagonally dominant at node "
                    f"{nodes[node]} (control {atom}): |a01|={abs(cross[node]):g}"
                    f" exceeds a00={a[node, 0, 0]:g} or a11={a[node, 1, 1]:g};"
                    " the upwind stencil cannot produce probabilities"
                )
            coeff[ui, :, 1] = slack0 / 2.0 + hx * bm[:, 0]
            coeff[ui, :, 2] = slack0 / 2.0 + hx * bp[:, 0]
            coeff[ui, :, 3] = slack1 / 2.0 + hx * bm[:, 1]
            coeff[ui, :, 4] = slack1 / 2.0 + hx * bp[:, 1]
            coeff[ui, :, 5] = np.maximum(cross, 0.0) / 2.0
            coeff[ui, :, 6] = np.maximum(cross, 0.0) / 2.0
            coeff[ui, :, 7] = np.maximum(-cross, 0.0) / 2.0
            coeff[ui, :, 8] = np.maximum(-cross, 0.0) / 2.0
        worst = max(worst, float(np.max(coeff[ui].sum(axis=1))))
    substeps = max(1, int(np.ceil(worst * dt / hx**2 - PROB_TOL)))
    if substeps > MAX_SUBSTEPS:
        raise GridError(
            f"stability needs {substeps} substeps (> {MAX_SUBSTEPS}) at "
            f"t={t:g}: dt={dt:g} is too coarse for hx={hx:g} with drift/"
            "diffusion this strong; enlarge hx or reduce dt"
        )
    dts = dt / substeps
    probs = coeff * (dts / hx**2)
    probs[:, :, 0] = 1.0 - probs[:, :, 1:].sum(axis=2)
    if np.min(probs[:, :, 0]) < -PROB_TOL:
        raise GridError("internal: stay probability negative after substepping")
    np.clip(probs[:, :, 0], 0.0, None, out=probs[:, :, 0])
    if ms.vector_boundary_cost:
        per_target = np.einsum("nsj,nj->ns", geo.charged_disp, hval)
        charge = np.einsum("uns,ns->un", probs, per_target)
    else:
        disp_norm = np.linalg.norm(geo.charged_disp, axis=2)
        charge = np.einsum("uns,ns->un", probs, disp_norm) * hval[None, :]
    trunc = float(np.max(np.einsum("uns,ns->un", probs, geo.truncated * 1.0)))
    return probs, charge, fvals, substeps, trunc


def build_chain(ms: ModelSpec, penalty: Optional[int], flow: MeasureFlow,
                grid: DPGrid) -> TransitionModel:
    """Assemble the chain for every slice of the flow's time grid.

    In reflected mode every grid node must lie in the domain closure; the
    penalized mode accepts any grid and relies on the margin.  The returned
    model records the worst one-substep probability mass lost to truncation.
    """
    if grid.dim != ms.dim:
        raise GridError(f"grid dim {grid.dim} != model dim {ms.dim}")
    if penalty is not None:
        penalty = validate_penalty(penalty)
    nodes = grid.nodes()
    if penalty is None:
        inside = ms.dom.contains(nodes)
        if not np.all(inside):
            raise GridError(
                "reflected-mode grid has nodes outside the domain (first: "
                f"{nodes[int(np.argmin(inside))]}); align the box with the "
                "domain or use penalized mode"
            )
    geo = _build_geometry(grid, ms.dom, penalized=penalty is not None)
    probs, charges, costs, subs = [], [], [], []
    worst_trunc = 0.0
    for k in range(flow.n_steps):
        p, c, f, s, tr = _slice_rows(
            ms, penalty, grid, geo, nodes, float(flow.times[k]),
            flow.frames[k], flow.dt,
        )
        probs.append(p)
        charges.append(c)
        costs.append(f)
        subs.append(s)
        worst_trunc = max(worst_trunc, tr)
    terminal = np.asarray(
        ms.terminal_cost(nodes, flow.frames[-1]), dtype=float
    )
    return TransitionModel(
        grid=grid, times=np.asarray(flow.times, dtype=float), penalty=penalty,
        geometry=geo, probs=probs, charge=charges, run_cost=costs,
        terminal=terminal, substeps=np.asarray(subs, dtype=int),
        truncated_mass=worst_trunc,
    )


# ---------------------------------------------------------------- recursion


@dataclass(eq=False)
class ValueField:
    """Backward-recursion output on the grid.

    ``V`` has shape (M+1, n_nodes); ``argmin`` (M, n_nodes) holds the
    minimizing control index per slice (ties to the lowest index), and
    ``runner_gap`` the value handicap of the second-best control, zero when
    only one control exists.
    """

    grid: DPGrid
    times: np.ndarray
    V: np.ndarray
    argmin: np.ndarray
    runner_up: np.ndarray
    runner_gap: np.ndarray

    def value_at(self, t_index: int, x: np.ndarray) -> np.ndarray:
        return self.V[t_index][self.grid.nearest_node(x)]


def _apply_control_step(chain: TransitionModel, k: int, v: np.ndarray
                        ) -> np.ndarray:
    """Per-control continuation value over slice k: substeps of P v + charge."""
    p = chain.probs[k]
    c = chain.charge[k]
    idx = chain.geometry.idx
    out = np.broadcast_to(v, (p.shape[0],) + v.shape).copy()
    for _ in range(int(chain.substeps[k])):
        out = c + np.einsum("uns,uns->un", p, out[:, idx])
    return out


def solve_dp(chain: TransitionModel, ms: ModelSpec, flow: MeasureFlow):
    """Backward recursion; returns (ValueField, StrictFeedback).

    V(t_k) = min_u [ f(t_k, x, mu_k, u) dt + boundary charges + E V(t_{k+1}) ]
    with terminal V = g.  The feedback law looks controls up at the nearest
    grid node and time slice.
    """
    if chain.n_slices != flow.n_steps or not np.allclose(
        chain.times, flow.times, atol=1e-9
    ):
        raise ConfigError("chain and flow time grids do not match")
    m = chain.n_slices
    n_nodes = chain.grid.n_nodes
    n_u = chain.probs[0].shape[0]
    v_all = np.empty((m + 1, n_nodes))
    arg = np.empty((m, n_nodes), dtype=np.int64)
    arg2 = np.empty((m, n_nodes), dtype=np.int64)
    gap = np.zeros((m, n_nodes))
    v_all[m] = chain.terminal
    v = chain.terminal
    dt = chain.dt
    for k in range(m - 1, -1, -1):
        q = chain.run_cost[k] * dt + _apply_control_step(chain, k, v)
        best = np.argmin(q, axis=0)
        arg[k] = best
        v = q[best, np.arange(n_nodes)]
        if n_u > 1:
            masked = q.copy()
            masked[best, np.arange(n_nodes)] = np.inf
            second = np.argmin(masked, axis=0)
            arg2[k] = second
            gap[k] = masked[second, np.arange(n_nodes)] - v
        else:
            arg2[k] = best
        v_all[k] = v
    field = ValueField(grid=chain.grid, times=chain.times, V=v_all,
                       argmin=arg, runner_up=arg2, runner_gap=gap)
    return field, feedback_law(field, ms)


def _time_slice(times: np.ndarray, t: float) -> int:
    dt = float(times[1] - times[0])
    return int(np.clip(np.floor((t - times[0]) / dt + 1e-9), 0,
                       times.size - 2))


def feedback_law(field: ValueField, ms: ModelSpec) -> StrictFeedback:
    """Strict feedback on the model's control grid via nearest-node lookup."""
    atoms = ms.control_grid()

    def fn(t, x):
        k = _time_slice(field.times, t)
        return atoms[field.argmin[k][field.grid.nearest_node(x)]]

    return StrictFeedback(fn)


def relaxed_probe(field: ValueField, ms: ModelSpec,
                  epsilon: float = 0.1) -> RelaxedFeedback:
    """Mixture law: weight 1 - eps on the argmin control, eps on the runner-up.

    A cheap probe of whether genuinely relaxed controls would improve on the
    strict DP law; with one control, or eps = 0, it degenerates to the strict
    law in relaxed form.
    """
    if not 0.0 <= epsilon <= 0.5:
        raise ConfigError("epsilon must lie in [0, 1/2]")
    atoms = ms.control_grid()
    n_u = atoms.shape[0]

    def fn(t, x):
        k = _time_slice(field.times, t)
        nodes = field.grid.nearest_node(x)
        w = np.zeros((x.shape[0], n_u))
        rows = np.arange(x.shape[0])
        w[rows, field.argmin[k][nodes]] += 1.0 - epsilon
        w[rows, field.runner_up[k][nodes]] += epsilon
        return w

    return RelaxedFeedback(fn, atoms)


# ------------------------------------------------------------ exploitability


@dataclass(frozen=True)
class ExploitabilityReport:
    """Cost of a candidate law minus the best-response value, both under mu."""

    gap: float
    cost: float
    cost_se: float
    dp_value: float

    def __str__(self):
        return (f"exploitability {self.gap:.6f} "
                f"(cost {self.cost:.6f} +/- {self.cost_se:.2g}, "
                f"best response {self.dp_value:.6f})")


def exploitability(ms: ModelSpec, flow: MeasureFlow, law,
                   penalty: Optional[int] = None,
                   grid: Optional[DPGrid] = None,
                   n_particles: int = 4000, seed: int = 0,
                   field: Optional[ValueField] = None) -> ExploitabilityReport:
    """How much the candidate law loses to the DP best response under mu.

    Simulates the candidate under the frozen flow (splitting scheme at the
    given penalty, projected scheme otherwise), compares with the DP value
    averaged over the realized initial states, and clips the gap below at
    -3 standard errors: anything lower signals an inconsistency rather than
    a better-than-optimal law.
    """
    if field is None:
        if grid is None:
            grid = DPGrid.for_model(ms, hx=0.05, dt=flow.dt, penalty=penalty)
        chain = build_chain(ms, penalty, flow, grid)
        field, _ = solve_dp(chain, ms, flow)
    scheme = "reflected_projected" if penalty is None else "penalized_splitting"
    cfg = SimConfig(n_particles=n_particles, dt=flow.dt, scheme=scheme,
                    penalty=penalty, seed=seed, interaction="frozen")
    paths, _ = simulate(ms, cfg, law, frozen_flow=flow)
    rep = evaluate_cost(ms, paths, flow)
    dp0 = float(np.mean(field.value_at(0, paths.X[0])))
    gap = max(rep.value - dp0, -3.0 * rep.stderr)
    return ExploitabilityReport(gap=gap, cost=rep.value, cost_se=rep.stderr,
                                dp_value=dp0)


def value_to_csv(field: ValueField, ms: ModelSpec, path) -> None:
    """Rows (t, node coords, V, control index; -1 on the terminal slice)."""
    nodes = field.grid.nodes()
    d = nodes.shape[1]
    header = "t," + ",".join(f"x_{j + 1}" for j in range(d)) + ",value,u_index"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for k in range(field.V.shape[0]):
            t = format_float(field.times[k])
            last = k == field.V.shape[0] - 1
            for i in range(nodes.shape[0]):
                coords = ",".join(format_float(v) for v in nodes[i])
                u = -1 if last else int(field.argmin[k, i])
                fh.write(f"{t},{coords},{format_float(field.V[k, i])},{u}\n")
