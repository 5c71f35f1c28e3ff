"""Dataset generation and gradient-based training of Koopman models.

Datasets are collections of snapshot matrices (X_i, Y_i[, U_i]) sampled
from the rigid-body simulator, in either momentum or explicit state
convention.  Training minimizes a one-step prediction + lifting
consistency loss (optionally a multi-step variant) with L1/L2
regularization over all trainable parameters, using Adam.  The proposed
variant never trains its input matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .koopman import KoopmanModel, fixed_input_matrix, kron_zu
from .lifting import EncoderNetwork


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class ExcitationSpec:
    """Initial-state box and zero-order-hold random torque excitation.

    Torques are resampled uniformly in [-u_max, u_max] every
    ``hold_time`` seconds and clipped to the same bounds.
    """

    q0_low: float = -math.pi
    q0_high: float = math.pi
    qd0_low: float = -0.5
    qd0_high: float = 0.5
    u_max: float = 2.0
    hold_time: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExcitationSpec":
        return cls(**doc)


@dataclass
class Trajectory:
    """Snapshot matrices of one trajectory: columns are consecutive states."""

    X: np.ndarray                 # (2n, w-1)
    Y: np.ndarray                 # (2n, w-1)
    U: np.ndarray | None = None   # (m, w-1)

    def states(self) -> np.ndarray:
        """Full state sequence, shape (w, 2n)."""
        return np.concatenate([self.X, self.Y[:, -1:]], axis=1).T


@dataclass
class TrajectoryDataset:
    kind: str                     # 'actuated' | 'unactuated'
    convention: str               # 'momentum' | 'explicit'
    dt: float
    n: int
    m: int
    trajectories: list
    seed: int | None = None
    resampled: int = 0
    manipulator: dict | None = None
    excitation: dict | None = None

    def __post_init__(self):
        if self.kind not in ("actuated", "unactuated"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "unactuated":
            for tr in self.trajectories:
                if tr.U is not None:
                    raise ValueError("unactuated datasets carry no input block")

    @property
    def p(self) -> int:
        return len(self.trajectories)

    @property
    def w(self) -> int:
        return self.trajectories[0].X.shape[1] + 1

    def validate_shift_consistency(self, atol=0.0) -> None:
        for i, tr in enumerate(self.trajectories):
            if tr.X.shape != tr.Y.shape:
                raise ValueError(f"trajectory {i}: X/Y shape mismatch")
            if not np.allclose(tr.Y[:, :-1], tr.X[:, 1:], atol=atol, rtol=0.0):
                raise ValueError(f"trajectory {i}: Y columns are not shifted X columns")

    def pairs(self, indices=None):
        """Stacked one-step samples (Xk, Xk1, U) with samples in rows."""
        trajs = self.trajectories if indices is None else [self.trajectories[i] for i in indices]
        Xk = np.concatenate([tr.X.T for tr in trajs], axis=0)
        Xk1 = np.concatenate([tr.Y.T for tr in trajs], axis=0)
        U = None
        if self.kind == "actuated":
            U = np.concatenate([tr.U.T for tr in trajs], axis=0)
        return Xk, Xk1, U

    def windows(self, horizon: int, indices=None):
        """Contiguous (horizon+1)-state windows for the multi-step loss."""
        trajs = self.trajectories if indices is None else [self.trajectories[i] for i in indices]
        S_list, U_list = [], []
        for tr in trajs:
            states = tr.states()
            w = states.shape[0]
            for s in range(w - horizon):
                S_list.append(states[s:s + horizon + 1])
                if tr.U is not None:
                    U_list.append(tr.U.T[s:s + horizon])
        states = np.stack(S_list, axis=0)
        U = np.stack(U_list, axis=0) if U_list else None
        return states, U

    # --- on-disk format: manifest + one CSV per trajectory ---

    def save(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        state_names = [f"q{i+1}" for i in range(self.n)]
        state_names += [(f"p{i+1}" if self.convention == "momentum" else f"qd{i+1}")
                        for i in range(self.n)]
        u_names = [f"u{i+1}" for i in range(self.m)] if self.kind == "actuated" else []
        files = []
        for idx, tr in enumerate(self.trajectories):
            name = f"traj_{idx:04d}.csv"
            files.append(name)
            states = tr.states()
            lines = ["t," + ",".join(state_names + u_names)]
            for k in range(states.shape[0]):
                row = [_fmt(k * self.dt)] + [_fmt(v) for v in states[k]]
                if u_names:
                    if k < states.shape[0] - 1:
                        row += [_fmt(v) for v in tr.U[:, k]]
                    else:
                        row += [""] * self.m
                lines.append(",".join(row))
            (outdir / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest = {
            "kind": self.kind,
            "state_convention": self.convention,
            "dt": self.dt,
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "w": self.w,
            "seed": self.seed,
            "resampled": self.resampled,
            "manipulator": self.manipulator,
            "excitation": self.excitation,
            "trajectory_files": files,
        }
        (outdir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, indir) -> "TrajectoryDataset":
        indir = Path(indir)
        manifest = json.loads((indir / "manifest.json").read_text(encoding="utf-8"))
        n, m = manifest["n"], manifest["m"]
        actuated = manifest["kind"] == "actuated"
        trajectories = []
        for name in manifest["trajectory_files"]:
            lines = (indir / name).read_text(encoding="utf-8").strip().split("\n")
            rows = [ln.split(",") for ln in lines[1:]]
            states = np.array([[float(v) for v in r[1:1 + 2 * n]] for r in rows])
            X = states[:-1].T
            Y = states[1:].T
            U = None
            if actuated:
                U = np.array([[float(v) for v in r[1 + 2 * n:]] for r in rows[:-1]]).T
            trajectories.append(Trajectory(X=X, Y=Y, U=U))
        return cls(kind=manifest["kind"], convention=manifest["state_convention"],
                   dt=manifest["dt"], n=n, m=m, trajectories=trajectories,
                   seed=manifest.get("seed"), resampled=manifest.get("resampled", 0),
                   manipulator=manifest.get("manipulator"),
                   excitation=manifest.get("excitation"))


def _simulate_batch(model, q0, qd0, torques, hold_steps, steps, dt):
    """Integrate a batch of trajectories; returns (q, qd, u) histories."""
    B, n = q0.shape
    q_hist = np.empty((steps + 1, B, n))
    qd_hist = np.empty((steps + 1, B, n))
    u_hist = np.empty((steps, B, torques.shape[2]))
    q, qd = q0.copy(), qd0.copy()
    q_hist[0], qd_hist[0] = q, qd
    for k in range(steps):
        u = torques[:, k // hold_steps, :]
        u_hist[k] = u
        q, qd = dyn.rk4_step(model, q, qd, u, dt, None, k * dt)
        q_hist[k + 1], qd_hist[k + 1] = q, qd
    return q_hist, qd_hist, u_hist


def generate_dataset(manip: dyn.ManipulatorModel, kind: str, p: int, w: int,
                     dt: float, excitation: ExcitationSpec | None = None,
                     seed: int = 0, convention: str = "momentum") -> TrajectoryDataset:
    """Simulate p random trajectories of w snapshots each.

    Actuated trajectories apply zero-order-hold uniform random torques;
    unactuated ones evolve freely from random initial states.  All
    randomness derives from ``seed`` via per-trajectory child seeds, so
    the result is reproducible and independent of batching.  Diverged
    trajectories are resampled with fresh child seeds and counted.
    """
    if p < 2 or w < 2:
        raise ValueError("need p >= 2 trajectories and w >= 2 snapshots")
    exc = excitation or ExcitationSpec()
    n, m = manip.n, manip.n
    steps = w - 1
    hold_steps = max(1, round(exc.hold_time / dt))
    n_holds = (steps + hold_steps - 1) // hold_steps
    children = np.random.SeedSequence(seed).spawn(20 * p)

    def draw(traj_index, attempt):
        rng = np.random.default_rng(children[attempt * p + traj_index])
        q0 = rng.uniform(exc.q0_low, exc.q0_high, size=n)
        qd0 = rng.uniform(exc.qd0_low, exc.qd0_high, size=n)
        if kind == "actuated":
            tor = rng.uniform(-exc.u_max, exc.u_max, size=(n_holds, m))
        else:
            tor = np.zeros((n_holds, m))
        return q0, qd0, np.clip(tor, -exc.u_max, exc.u_max)

    attempts = np.zeros(p, dtype=int)
    pending = list(range(p))
    results = [None] * p
    resampled = 0
    while pending:
        q0 = np.stack([draw(i, attempts[i])[0] for i in pending])
        qd0 = np.stack([draw(i, attempts[i])[1] for i in pending])
        tor = np.stack([draw(i, attempts[i])[2] for i in pending])
        q_hist, qd_hist, u_hist = _simulate_batch(manip, q0, qd0, tor,
                                                  hold_steps, steps, dt)
        still = []
        for slot, i in enumerate(pending):
            qs, qds = q_hist[:, slot], qd_hist[:, slot]
            ok = (np.all(np.isfinite(qs)) and np.all(np.isfinite(qds))
                  and np.max(np.abs(qs)) < dyn.DIVERGENCE_LIMIT
                  and np.max(np.abs(qds)) < dyn.DIVERGENCE_LIMIT)
            if ok:
                results[i] = (qs, qds, u_hist[:, slot])
            else:
                attempts[i] += 1
                resampled += 1
                if attempts[i] >= 19:
                    raise dyn.DivergenceError(
                        f"trajectory {i} diverged {attempts[i]} times; "
                        "reduce excitation")
                still.append(i)
        pending = still

    trajectories = []
    for qs, qds, us in results:
        if convention == "momentum":
            second = dyn.momentum_from_velocity(manip, qs, qds)
        else:
            second = qds
        states = np.concatenate([qs, second], axis=1)       # (w, 2n)
        X = states[:-1].T
        Y = states[1:].T
        U = us.T if kind == "actuated" else None
        trajectories.append(Trajectory(X=X, Y=Y, U=U))
    return TrajectoryDataset(kind=kind, convention=convention, dt=dt, n=n, m=m,
                             trajectories=trajectories, seed=seed,
                             resampled=resampled, manipulator=manip.to_dict(),
                             excitation=exc.to_dict())


@dataclass
class TrainConfig:
    alpha1: float = 1.0           # prediction-loss weight
    alpha2: float = 1.0           # lifting-consistency weight
    gamma1: float = 1e-5          # L1 over trainable parameters
    gamma2: float = 1e-4          # L2 over trainable parameters
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    hidden: tuple = (128, 128, 128)
    feature_dim: int = 64
    activation: str = "tanh"
    val_fraction: float = 0.1
    patience: int = 10
    horizon: int = 1              # >1 enables the multi-step rollout loss

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("loss weights alpha1, alpha2 must be positive")
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("regularization weights must be non-negative")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


class _Params:
    """Flat view over (encoder | A | optional B) used by the optimizer."""

    def __init__(self, encoder, A, B_learnable):
        self.encoder = encoder
        self.A = A
        self.B = B_learnable      # None for the proposed variant
        self.n_enc = encoder.num_params
        self.n_A = A.size
        self.n_B = 0 if B_learnable is None else B_learnable.size

    @property
    def size(self):
        return self.n_enc + self.n_A + self.n_B

    def get(self):
        parts = [self.encoder.params_vector(), self.A.ravel()]
        if self.B is not None:
            parts.append(self.B.ravel())
        return np.concatenate(parts)

    def set(self, vec):
        self.encoder.set_params_vector(vec[:self.n_enc])
        self.A[...] = vec[self.n_enc:self.n_enc + self.n_A].reshape(self.A.shape)
        if self.B is not None:
            self.B[...] = vec[self.n_enc + self.n_A:].reshape(self.B.shape)


def _norm_rows(r):
    """Row norms and safely-normalized rows (zero rows stay zero)."""
    nrm = np.linalg.norm(r, axis=-1)
    safe = np.where(nrm > 1e-12, nrm, 1.0)
    return nrm, r / safe[..., None]


def _loss_terms(encoder, A, B, variant, states, U, cfg, theta, want_grad):
    """Loss of a window batch; optionally its gradient in _Params layout.

    states: (S, h+1, 2n); U: (S, h, m) or None; h = cfg.horizon.
    """
    S, hp1, nx = states.shape
    h = hp1 - 1
    flat = states.reshape(S * hp1, nx)
    phi, cache = encoder._forward_cached(flat)
    z_all = np.concatenate([flat, phi], axis=1).reshape(S, hp1, -1)
    L = z_all.shape[2]

    zhat = [z_all[:, 0]]
    for j in range(h):
        zj = zhat[-1] @ A.T
        if U is not None and B is not None:
            if variant == "nbk":
                zj = zj + kron_zu(zhat[-1], U[:, j]) @ B.T
            else:
                zj = zj + U[:, j] @ B.T
        zhat.append(zj)

    denom = S * h
    L_pred = 0.0
    L_lift = 0.0
    pred_units = []
    lift_units = []
    for j in range(1, h + 1):
        npred, upred = _norm_rows(zhat[j][:, :nx] - states[:, j])
        nlift, ulift = _norm_rows(zhat[j] - z_all[:, j])
        L_pred += np.sum(npred) / denom
        L_lift += np.sum(nlift) / denom
        pred_units.append(upred)
        lift_units.append(ulift)

    l1 = float(np.sum(np.abs(theta)))
    l2 = float(np.linalg.norm(theta))
    total = cfg.alpha1 * L_pred + cfg.alpha2 * L_lift + cfg.gamma1 * l1 + cfg.gamma2 * l2
    components = {"pred": float(L_pred), "lift": float(L_lift),
                  "l1": l1, "l2": l2, "total": float(total)}
    if not want_grad:
        return total, components, None

    dA = np.zeros_like(A)
    b_learnable = variant != "proposed" and B is not None and U is not None
    dB = np.zeros_like(B) if b_learnable else None
    B3 = B.reshape(L, L, -1) if (variant == "nbk" and B is not None) else None
    target_adj = np.zeros_like(z_all)
    carry = np.zeros((S, L))
    for j in range(h, 0, -1):
        direct = np.zeros((S, L))
        direct[:, :nx] = (cfg.alpha1 / denom) * pred_units[j - 1]
        direct += (cfg.alpha2 / denom) * lift_units[j - 1]
        target_adj[:, j] = -(cfg.alpha2 / denom) * lift_units[j - 1]
        a = direct + carry
        dA += a.T @ zhat[j - 1]
        if dB is not None:
            if variant == "nbk":
                dB += a.T @ kron_zu(zhat[j - 1], U[:, j - 1])
            else:
                dB += a.T @ U[:, j - 1]
        carry = a @ A
        if B3 is not None:
            carry = carry + np.einsum("sr,rja,sa->sj", a, B3, U[:, j - 1])
    target_adj[:, 0] = carry

    if encoder.num_params:
        enc_grads = encoder._backward(cache, target_adj.reshape(S * hp1, L)[:, nx:])
        enc_vec = encoder._grads_to_vector(enc_grads)
    else:
        enc_vec = np.zeros(0)
    parts = [enc_vec, dA.ravel()]
    if dB is not None:
        parts.append(dB.ravel())
    grad = np.concatenate(parts)
    l2_safe = max(l2, 1e-12)
    grad = grad + cfg.gamma1 * np.sign(theta) + cfg.gamma2 * theta / l2_safe
    return total, components, grad


def _batch_to_windows(batch):
    """Accept (Xk, Xk1, U) pair batches or (states, U) window batches."""
    if len(batch) == 3:
        Xk, Xk1, U = batch
        states = np.stack([np.asarray(Xk, dtype=float),
                           np.asarray(Xk1, dtype=float)], axis=1)
        U = None if U is None else np.asarray(U, dtype=float)[:, None, :]
        return states, U
    states, U = batch
    return np.asarray(states, dtype=float), None if U is None else np.asarray(U, dtype=float)


def loss(model: KoopmanModel, batch, config: TrainConfig | None = None):
    """Training loss of Eq-style one-step (or windowed) batches.

    ``batch`` is (Xk, Xk1, U) with samples in rows (U may be None for the
    unactuated architecture), or (states, U) windows for horizon > 1.
    Returns (total, components).
    """
    cfg = config or TrainConfig()
    states, U = _batch_to_windows(batch)
    B_learn = None if model.variant == "proposed" else model.B
    params = _Params(model.encoder, model.A, B_learn)
    theta = params.get()
    B_used = model.B if U is not None else None
    total, comps, _ = _loss_terms(model.encoder, model.A, B_used, model.variant,
                                  states, U,
                                  _override_horizon(cfg, states.shape[1] - 1),
                                  theta, want_grad=False)
    if not np.isfinite(total):
        raise TrainingDivergedError("loss is non-finite")
    return total, comps


def _override_horizon(cfg, h):
    if cfg.horizon == h:
        return cfg
    doc = cfg.to_dict()
    doc["horizon"] = h
    return TrainConfig.from_dict(doc)


class Adam:
    """Standard Adam with bias correction; fully deterministic."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(dataset: TrajectoryDataset, config: TrainConfig, variant: str) -> KoopmanModel:
    """Fit a Koopman model of the requested variant to the dataset.

    The proposed variant accepts actuated or unactuated data (the input
    matrix is known a priori); the explicit baselines need actuated data
    to identify their input matrices.  Returns the model with the best
    validation loss on a held-out split; the loss history is stored in
    the model metadata.
    """
    if variant not in ("proposed", "nlk", "nbk"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "proposed" and dataset.convention != "momentum":
        raise ValueError("proposed variant trains on momentum-convention data")
    if variant != "proposed":
        if dataset.kind != "actuated":
            raise ValueError(f"{variant} requires an actuated dataset")
        if dataset.convention != "explicit":
            raise ValueError(f"{variant} trains on explicit-convention data")

    cfg = config
    n, m = dataset.n, dataset.m
    nx = 2 * n
    rng = np.random.default_rng(cfg.seed)

    # held-out validation split, by trajectory when possible
    p = dataset.p
    order = rng.permutation(p)
    n_val = max(1, int(round(cfg.val_fraction * p))) if p >= 5 else 0
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    if not train_idx:
        train_idx, val_idx = list(range(p)), []

    states_va = U_va = None
    if cfg.horizon == 1:
        Xk, Xk1, U = dataset.pairs(train_idx)
        states_tr = np.stack([Xk, Xk1], axis=1)
        U_tr = None if U is None else U[:, None, :]
        if val_idx:
            Xv, Xv1, Uv = dataset.pairs(val_idx)
            states_va = np.stack([Xv, Xv1], axis=1)
            U_va = None if Uv is None else Uv[:, None, :]
    else:
        states_tr, U_tr = dataset.windows(cfg.horizon, train_idx)
        if val_idx:
            states_va, U_va = dataset.windows(cfg.horizon, val_idx)
    have_val = states_va is not None

    encoder = EncoderNetwork.create(input_dim=nx, hidden=cfg.hidden,
                                    feature_dim=cfg.feature_dim,
                                    activation=cfg.activation, seed=cfg.seed)
    train_states_flat = states_tr.reshape(-1, nx)
    mean = train_states_flat.mean(axis=0)
    std = train_states_flat.std(axis=0)
    encoder.set_normalization(mean, np.where(std > 1e-8, std, 1.0))

    L = nx + cfg.feature_dim
    A = np.eye(L)
    if variant == "nlk":
        B = np.zeros((L, m))
    elif variant == "nbk":
        B = np.zeros((L, L * m))
    else:
        B = fixed_input_matrix(n, m, cfg.feature_dim, dataset.dt)
    B_learn = None if variant == "proposed" else B
    B_used = B if dataset.kind == "actuated" else None

    params = _Params(encoder, A, B_learn)
    theta = params.get()
    opt = Adam(theta.size, lr=cfg.learning_rate)

    S = states_tr.shape[0]
    batch = min(cfg.batch_size, S)
    history = {"train": [], "val": []}
    best_theta = theta.copy()
    best_val = math.inf
    stall = 0

    def evaluate(states, U_w):
        chunks = range(0, states.shape[0], 8192)
        tot, cnt = 0.0, 0
        for s in chunks:
            sl = slice(s, s + 8192)
            t, _, _ = _loss_terms(encoder, A, B_used, variant, states[sl],
                                  None if U_w is None else U_w[sl],
                                  cfg, theta, want_grad=False)
            k = states[sl].shape[0]
            tot += t * k
            cnt += k
        return tot / cnt

    for epoch in range(cfg.epochs):
        perm = rng.permutation(S)
        epoch_loss = 0.0
        for s in range(0, S, batch):
            idx = perm[s:s + batch]
            total, _, grad = _loss_terms(
                encoder, A, B_used, variant, states_tr[idx],
                None if U_tr is None else U_tr[idx], cfg, theta, want_grad=True)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; last finite val "
                    f"loss {best_val:.6g}")
            theta = opt.step(theta, grad)
            params.set(theta)
            epoch_loss += total * idx.size
        history["train"].append(epoch_loss / S)

        val = evaluate(states_va, U_va) if have_val else history["train"][-1]
        history["val"].append(val)
        if val < best_val - 1e-12:
            best_val = val
            best_theta = theta.copy()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    params.set(best_theta)
    model = KoopmanModel(
        variant=variant,
        convention=dataset.convention,
        n=n, m=m, dt=dataset.dt, A=A, encoder=encoder,
        B=B if variant != "proposed" else None,
        metadata={
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "dataset": {"kind": dataset.kind, "p": dataset.p, "w": dataset.w,
                        "seed": dataset.seed, "resampled": dataset.resampled},
            "manipulator": dataset.manipulator,
            "loss_history": history,
            "best_val_loss": best_val if have_val else history["train"][-1],
            "epochs_run": len(history["train"]),
        })
    return model
