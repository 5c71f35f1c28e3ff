"""Linear MPC over the lifted model with in-loop disturbance compensation.

The horizon problem is condensed: predicted states are eliminated, so
the only decision variables are the stacked inputs U.  The disturbance
estimate enters the prediction through the equality dynamics (held
constant over the horizon), never as a post-hoc input offset, keeping
the controller a single convex QP.  The QP is solved by a deterministic
operator-splitting (ADMM) iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geso import GesoState, geso_update
from .koopman import KoopmanModel


@dataclass
class MpcConfig:
    """Horizon, tracking/input weights, bounds and solver settings."""

    horizon: int = 20
    position_weight: float = 100.0
    momentum_weight: float = 1.0
    input_weight: float = 0.01
    state_weight: np.ndarray | None = None   # explicit (2n,) override
    # scale of the final-stage tracking weight; > 1 approximates the
    # infinite-horizon cost-to-go and removes the steady-state droop a
    # truncated horizon leaves under constant disturbances
    terminal_scale: float = 1.0
    u_min: np.ndarray | float = -math.inf
    u_max: np.ndarray | float = math.inf
    x_min: np.ndarray | float = -math.inf
    x_max: np.ndarray | float = math.inf
    solver_tol: float = 1e-8
    max_iter: int = 4000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.input_weight <= 0:
            raise ValueError("input weight must be strictly positive")
        if self.position_weight < 0 or self.momentum_weight < 0:
            raise ValueError("tracking weights must be non-negative")

    def state_weights(self, n: int) -> np.ndarray:
        if self.state_weight is not None:
            w = np.asarray(self.state_weight, dtype=float)
            if w.shape != (2 * n,):
                raise ValueError(f"state_weight must have shape ({2 * n},)")
            return w
        return np.concatenate([np.full(n, self.position_weight),
                               np.full(n, self.momentum_weight)])

    def input_bounds(self, m: int):
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (m,)).astype(float)
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (m,)).astype(float)
        if np.any(lo > hi):
            raise ValueError("input bounds are not ordered (u_min > u_max)")
        return lo, hi

    def state_bounds(self, n: int):
        lo = np.broadcast_to(np.asarray(self.x_min, dtype=float), (2 * n,)).astype(float)
        hi = np.broadcast_to(np.asarray(self.x_max, dtype=float), (2 * n,)).astype(float)
        if np.any(lo > hi):
            raise ValueError("state bounds are not ordered (x_min > x_max)")
        return lo, hi

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            arr = np.asarray(v, dtype=float)
            if arr.ndim == 0:
                f = float(arr)
                return "inf" if math.isinf(f) and f > 0 else ("-inf" if math.isinf(f) else f)
            return arr.tolist()
        return {
            "horizon": self.horizon,
            "position_weight": self.position_weight,
            "momentum_weight": self.momentum_weight,
            "input_weight": self.input_weight,
            "state_weight": enc(self.state_weight),
            "terminal_scale": self.terminal_scale,
            "u_min": enc(self.u_min), "u_max": enc(self.u_max),
            "x_min": enc(self.x_min), "x_max": enc(self.x_max),
            "solver_tol": self.solver_tol, "max_iter": self.max_iter,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MpcConfig":
        def dec(v, default):
            if v is None:
                return default
            if v == "inf":
                return math.inf
            if v == "-inf":
                return -math.inf
            if isinstance(v, list):
                return np.asarray(v, dtype=float)
            return float(v)
        kwargs = {}
        for key in ("horizon", "position_weight", "momentum_weight",
                    "input_weight", "terminal_scale", "solver_tol", "max_iter"):
            if key in doc:
                kwargs[key] = doc[key]
        if doc.get("state_weight") is not None:
            kwargs["state_weight"] = np.asarray(doc["state_weight"], dtype=float)
        kwargs["u_min"] = dec(doc.get("u_min"), -math.inf)
        kwargs["u_max"] = dec(doc.get("u_max"), math.inf)
        kwargs["x_min"] = dec(doc.get("x_min"), -math.inf)
        kwargs["x_max"] = dec(doc.get("x_max"), math.inf)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "MpcConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class QpProblem:
    """min 0.5 x'Hx + f'x  s.t.  lb <= x <= ub  and  G x <= h."""

    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        d = self.f.shape[0]
        if self.H.shape != (d, d):
            raise ValueError(f"H has shape {self.H.shape}, expected {(d, d)}")
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise ValueError("H must be symmetric")
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (d,)).astype(float)
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (d,)).astype(float)
        if self.G is not None:
            self.G = np.asarray(self.G, dtype=float)
            self.h = np.asarray(self.h, dtype=float)
            if self.G.shape[1] != d or self.G.shape[0] != self.h.shape[0]:
                raise ValueError("inconsistent affine constraint dimensions")

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    def cost(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    status: str                  # 'optimal' | 'inaccurate' | 'infeasible'
    iterations: int
    primal_residual: float
    dual_residual: float
    cost: float
    y_box: np.ndarray
    y_affine: np.ndarray | None = None
    # (cost at the projected iterate, r_p, r_d) per iteration when recorded
    cost_history: list = field(default_factory=list)


def solve_qp(qp: QpProblem, tol: float = 1e-8, max_iter: int = 4000,
             warm_x: np.ndarray | None = None,
             warm_y: np.ndarray | None = None,
             record_costs: bool = False) -> QpSolution:
    """Operator-splitting (ADMM) solve of a convex boxed QP.

    Deterministic fixed iteration with periodic penalty adaptation.
    Returns KKT residuals with the solution; on the box block, active
    bounds are satisfied exactly (the primal iterate is projected).
    """
    d = qp.dim
    if np.any(qp.lb > qp.ub):
        return QpSolution(x=np.zeros(d), status="infeasible", iterations=0,
                          primal_residual=math.inf, dual_residual=math.inf,
                          cost=math.nan, y_box=np.zeros(d))
    have_aff = qp.G is not None and qp.G.shape[0] > 0
    if have_aff:
        A = np.vstack([np.eye(d), qp.G])
        lo = np.concatenate([qp.lb, np.full(qp.G.shape[0], -math.inf)])
        hi = np.concatenate([qp.ub, qp.h])
        AtA = A.T @ A
    else:
        A = None
        lo, hi = qp.lb, qp.ub
        AtA = np.eye(d)
    k_rows = d + (qp.G.shape[0] if have_aff else 0)

    sigma = 1e-6
    rho = 0.1
    x = np.zeros(d) if warm_x is None else np.asarray(warm_x, dtype=float).copy()
    w = np.zeros(k_rows)
    if warm_y is not None:
        w = np.asarray(warm_y, dtype=float) / rho

    def mulA(v):
        return np.concatenate([v, qp.G @ v]) if have_aff else v

    def mulAT(v):
        return v[:d] + qp.G.T @ v[d:] if have_aff else v

    z = np.clip(mulA(x) + w, lo, hi)
    L = np.linalg.cholesky(qp.H + sigma * np.eye(d) + rho * AtA)
    status = "inaccurate"
    r_p = r_d = math.inf
    cost_history = []
    y_prev = rho * w
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - qp.f + rho * mulAT(z - w)
        x = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        Ax = mulA(x)
        z = np.clip(Ax + w, lo, hi)
        w = w + Ax - z
        y = rho * w
        r_p = float(np.max(np.abs(Ax - z))) if k_rows else 0.0
        r_d = float(np.max(np.abs(qp.H @ x + qp.f + mulAT(y))))
        if record_costs:
            cost_history.append((qp.cost(np.clip(x, qp.lb, qp.ub)), r_p, r_d))
        scale_p = 1.0 + max(np.max(np.abs(Ax)), np.max(np.abs(z)))
        scale_d = 1.0 + max(np.max(np.abs(qp.H @ x)), np.max(np.abs(qp.f)))
        if r_p <= tol * scale_p and r_d <= tol * scale_d:
            status = "optimal"
            break
        if it % 25 == 0:
            dy = y - y_prev
            y_prev = y.copy()
            if have_aff and _primal_infeasibility_certificate(qp, dy, d):
                status = "infeasible"
                break
            ratio = (r_p / scale_p) / max(r_d / scale_d, 1e-16)
            factor = float(np.clip(np.sqrt(ratio), 0.2, 5.0))
            if factor > 2.0 or factor < 0.5:
                new_rho = float(np.clip(rho * factor, 1e-6, 1e6))
                w = w * (rho / new_rho)         # keep the dual y = rho w intact
                rho = new_rho
                L = np.linalg.cholesky(qp.H + sigma * np.eye(d) + rho * AtA)

    # return the projected iterate: box bounds hold exactly by construction
    y = rho * w
    x_out = np.clip(x + w[:d], qp.lb, qp.ub) if status != "infeasible" else x
    if status != "infeasible":
        r_d = float(np.max(np.abs(qp.H @ x_out + qp.f + mulAT(y))))
        r_p = 0.0
        if have_aff:
            r_p = float(max(0.0, np.max(qp.G @ x_out - qp.h, initial=0.0)))
    sol = QpSolution(x=x_out, status=status, iterations=it,
                     primal_residual=r_p, dual_residual=r_d,
                     cost=qp.cost(x_out), y_box=y[:d],
                     y_affine=y[d:] if have_aff else None,
                     cost_history=cost_history)
    return sol


def _primal_infeasibility_certificate(qp, dy, d, eps=1e-10):
    """OSQP-style check that dy certifies primal infeasibility."""
    norm = np.max(np.abs(dy))
    if norm < eps:
        return False
    dy = dy / norm
    if np.max(np.abs(dy[:d] + qp.G.T @ dy[d:])) > 1e-6:
        return False
    # inf-bounded rows cannot support a certificate component
    support = 0.0
    ub_all = np.concatenate([qp.ub, qp.h])
    lb_all = np.concatenate([qp.lb, np.full(qp.G.shape[0], -math.inf)])
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any(pos[np.isinf(ub_all)] > 1e-8) or np.any(-neg[np.isinf(lb_all)] > 1e-8):
        return False
    finite_u, finite_l = np.isfinite(ub_all), np.isfinite(lb_all)
    support = float(ub_all[finite_u] @ pos[finite_u] + lb_all[finite_l] @ neg[finite_l])
    return support < -1e-8


class CondensedMpc:
    """Cached condensed transcription of the horizon problem for one model."""

    def __init__(self, model: KoopmanModel, cfg: MpcConfig):
        if model.variant == "nbk":
            raise ValueError("bilinear models are outside the linear MPC scope")
        self.model = model
        self.cfg = cfg
        s = cfg.horizon
        nx, m, L = model.state_dim, model.m, model.lifted_dim
        A, B = model.A, model.B

        powers = [np.eye(L)]
        for _ in range(s):
            powers.append(A @ powers[-1])
        CxAkB = [powers[i][:nx] @ B for i in range(s)]
        self.Phi = np.concatenate([powers[k][:nx] for k in range(1, s + 1)], axis=0)
        self.Gamma = np.zeros((s * nx, s * m))
        for k in range(1, s + 1):
            for j in range(k):
                self.Gamma[(k - 1) * nx:k * nx, j * m:(j + 1) * m] = CxAkB[k - 1 - j]
        blocks = np.cumsum([powers[i][:nx, :nx] for i in range(s)], axis=0)
        self.Omega = np.concatenate(list(blocks), axis=0)

        qdiag = np.tile(cfg.state_weights(model.n), s)
        qdiag[-nx:] *= cfg.terminal_scale
        rdiag = np.tile(np.full(m, cfg.input_weight), s)
        self.qdiag = qdiag
        self.H = 2.0 * ((self.Gamma * qdiag[:, None]).T @ self.Gamma + np.diag(rdiag))
        self.H = 0.5 * (self.H + self.H.T)
        u_lo, u_hi = cfg.input_bounds(m)
        self.lb = np.tile(u_lo, s)
        self.ub = np.tile(u_hi, s)
        x_lo, x_hi = cfg.state_bounds(model.n)
        self.x_lo_stack = np.tile(x_lo, s)
        self.x_hi_stack = np.tile(x_hi, s)
        self.have_state_bounds = np.any(np.isfinite(x_lo)) or np.any(np.isfinite(x_hi))

    def make_qp(self, z0, x_ref_seq, d_hat) -> QpProblem:
        s = self.cfg.horizon
        nx = self.model.state_dim
        x_ref_seq = np.asarray(x_ref_seq, dtype=float)
        if x_ref_seq.shape[0] < s:
            raise ValueError(f"need at least {s} reference rows, got {x_ref_seq.shape[0]}")
        refs = x_ref_seq[:s].reshape(s * nx)
        w = np.asarray(d_hat, dtype=float) * self.model.dt
        base = self.Phi @ np.asarray(z0, dtype=float) + self.Omega @ w
        c = base - refs
        f = 2.0 * (self.Gamma.T @ (self.qdiag * c))
        G = h = None
        if self.have_state_bounds:
            rows_hi = np.isfinite(self.x_hi_stack)
            rows_lo = np.isfinite(self.x_lo_stack)
            G = np.vstack([self.Gamma[rows_hi], -self.Gamma[rows_lo]])
            h = np.concatenate([(self.x_hi_stack - base)[rows_hi],
                                (base - self.x_lo_stack)[rows_lo]])
        return QpProblem(H=self.H, f=f, lb=self.lb, ub=self.ub, G=G, h=h)


def build_qp(model: KoopmanModel, z0, x_ref_seq, d_hat,
             cfg: MpcConfig) -> QpProblem:
    """Condensed QP for the current lifted state, references and d-hat.

    The first cfg.horizon rows of x_ref_seq are the references for the
    predicted steps 1..horizon.  d_hat is held constant over the horizon.
    """
    return CondensedMpc(model, cfg).make_qp(z0, x_ref_seq, d_hat)


@dataclass
class StepLog:
    t: float
    q_ref: np.ndarray
    q: np.ndarray
    u: np.ndarray
    d_hat: np.ndarray
    solve_iters: int
    kkt_residual: float
    solver_fault: bool


class MpcController:
    """Receding-horizon controller with an embedded GESO.

    One instance per control loop; step() is strictly sequential.  The
    previous solution warm-starts the solver (shifted by one stage), and
    on solver failure the previous input is held with a logged fault.
    """

    def __init__(self, model: KoopmanModel, cfg: MpcConfig,
                 k1: float = 40.0, k2: float = 800.0, use_geso: bool = True):
        self.model = model
        self.cfg = cfg
        self.use_geso = use_geso
        self.k1, self.k2 = k1, k2
        self.cond = CondensedMpc(model, cfg)
        self.obs: GesoState | None = None
        self.u_prev = np.zeros(model.m)
        self.U_prev: np.ndarray | None = None
        self.t = 0.0
        self.logs: list[StepLog] = []

    def step(self, x_meas, x_ref_window) -> np.ndarray:
        """Compute and return the input for the current measurement.

        x_ref_window needs horizon+1 rows: row 0 is the current-time
        reference (logged), rows 1..horizon feed the QP.
        """
        model, cfg = self.model, self.cfg
        x_meas = np.asarray(x_meas, dtype=float)
        x_ref_window = np.asarray(x_ref_window, dtype=float)
        if x_ref_window.shape[0] < cfg.horizon + 1:
            raise ValueError(f"reference window needs {cfg.horizon + 1} rows")
        z = model.lift(x_meas)
        if self.use_geso:
            if self.obs is None:
                self.obs = GesoState.initial(x_meas, self.k1, self.k2)
            self.obs = geso_update(self.obs, x_meas, z, self.u_prev, model,
                                   model.dt)
            d_hat = self.obs.d_hat
        else:
            d_hat = np.zeros(model.state_dim)
        qp = self.cond.make_qp(z, x_ref_window[1:], d_hat)
        warm = None
        if self.U_prev is not None:
            warm = np.concatenate([self.U_prev[model.m:], self.U_prev[-model.m:]])
        sol = solve_qp(qp, tol=cfg.solver_tol, max_iter=cfg.max_iter, warm_x=warm)
        fault = sol.status == "infeasible" or not np.all(np.isfinite(sol.x))
        if fault:
            u = self.u_prev.copy()
        else:
            u = sol.x[:model.m].copy()
            self.U_prev = sol.x
        self.logs.append(StepLog(
            t=self.t, q_ref=x_ref_window[0, :model.n].copy(),
            q=x_meas[:model.n].copy(), u=u.copy(), d_hat=d_hat.copy(),
            solve_iters=sol.iterations,
            kkt_residual=max(sol.primal_residual, sol.dual_residual),
            solver_fault=fault))
        self.u_prev = u
        self.t += model.dt
        return u

    def log_csv(self) -> str:
        n, m = self.model.n, self.model.m
        cols = (["t"] + [f"q_ref{i+1}" for i in range(n)]
                + [f"q{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)]
                + [f"d_hat{i+1}" for i in range(2 * n)]
                + ["solve_iters", "kkt_residual", "solver_fault"])
        lines = [",".join(cols)]
        for r in self.logs:
            vals = [r.t, *r.q_ref, *r.q, *r.u, *r.d_hat]
            row = [repr(float(v)) for v in vals]
            row += [str(r.solve_iters), repr(float(r.kkt_residual)),
                    str(int(r.solver_fault))]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"
