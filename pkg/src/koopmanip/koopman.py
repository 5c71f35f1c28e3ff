"""Koopman model variants and lifted-space prediction.

Three variants share the lifted state z = [x, phi(x)] and the
reconstruction x = z[:2n]:

* ``proposed``: momentum coordinates x = (q, M(q) qd), linear dynamics
  z+ = A z + B u with the input matrix fixed to [0; dt I; 0].  Only A
  (and the encoder) are learned.
* ``nlk``: explicit coordinates x = (q, qd), linear z+ = A z + B u with
  learned A and B.
* ``nbk``: explicit coordinates, bilinear z+ = A z + B (z kron u) with
  learned A and B; the Kronecker product is z-major, so block j of
  (z kron u) is z_j * u.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ManipulatorModel, MomentumState, velocity_from_momentum
from .lifting import EncoderNetwork

VARIANTS = ("proposed", "nlk", "nbk")
CONVENTIONS = ("momentum", "explicit")


def fixed_input_matrix(n: int, m: int, feature_dim: int, dt: float) -> np.ndarray:
    """The a-priori input matrix [0_{n x m}; dt I_{n x m}; 0_{N x m}]."""
    B = np.zeros((2 * n + feature_dim, m))
    B[n:2 * n, :] = dt * np.eye(n, m)
    return B


def kron_zu(z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """z-major Kronecker product, batched over leading axes."""
    return (z[..., :, None] * u[..., None, :]).reshape(z.shape[:-1] + (-1,))


@dataclass
class KoopmanModel:
    """Lifted linear (or bilinear) model plus its encoder.

    Treated as immutable once training finishes; prediction methods are
    read-only and safe to share across threads.
    """

    variant: str
    convention: str
    n: int
    m: int
    dt: float
    A: np.ndarray
    encoder: EncoderNetwork
    B: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown state convention {self.convention!r}")
        L = self.lifted_dim
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (L, L):
            raise ValueError(f"A has shape {self.A.shape}, expected {(L, L)}")
        if self.variant == "proposed":
            fixed = fixed_input_matrix(self.n, self.m, self.feature_dim, self.dt)
            if self.B is None:
                self.B = fixed
            elif not np.array_equal(np.asarray(self.B), fixed):
                raise ValueError("proposed variant must keep the fixed input matrix")
        else:
            if self.B is None:
                raise ValueError(f"variant {self.variant!r} needs a learned B")
            self.B = np.asarray(self.B, dtype=float)
            expected = (L, self.m) if self.variant == "nlk" else (L, L * self.m)
            if self.B.shape != expected:
                raise ValueError(f"B has shape {self.B.shape}, expected {expected}")

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    @property
    def state_dim(self) -> int:
        return 2 * self.n

    @property
    def lifted_dim(self) -> int:
        return 2 * self.n + self.feature_dim

    def lift(self, x) -> np.ndarray:
        return self.encoder.lift(x)

    def recover(self, z) -> np.ndarray:
        """C^x z: the physical-state block of the lifted state."""
        return np.asarray(z)[..., :self.state_dim]

    def predict(self, z, u) -> np.ndarray:
        """One lifted-space step; works on single vectors or batches."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.shape[-1] != self.lifted_dim:
            raise ValueError(f"z has dimension {z.shape[-1]}, expected {self.lifted_dim}")
        if u.shape[-1] != self.m:
            raise ValueError(f"u has dimension {u.shape[-1]}, expected {self.m}")
        if self.variant == "nbk":
            return z @ self.A.T + kron_zu(z, u) @ self.B.T
        return z @ self.A.T + u @ self.B.T

    def rollout(self, x0, u_seq):
        """Open-loop prediction from physical state x0 under inputs u_seq.

        Lifts once, then iterates entirely in lifted space.  Returns
        (states, diverged_at); states has one row per step including the
        initial state, truncated at the first non-finite step, in which
        case diverged_at is that step index (None otherwise).
        """
        x0 = np.asarray(x0, dtype=float)
        u_seq = np.asarray(u_seq, dtype=float).reshape(-1, self.m)
        z = self.lift(x0)
        states = [self.recover(z)]
        diverged_at = None
        for k, u in enumerate(u_seq):
            z = self.predict(z, u)
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 1e12:
                diverged_at = k + 1
                break
            states.append(self.recover(z))
        return np.stack(states, axis=0), diverged_at

    # --- persistence ---

    def to_dict(self) -> dict:
        doc = {
            "variant": self.variant,
            "state_convention": self.convention,
            "n": self.n,
            "m": self.m,
            "feature_dim": self.feature_dim,
            "dt": self.dt,
            "A": self.A.ravel().tolist(),
            "encoder": self.encoder.to_dict(),
            "metadata": self.metadata,
        }
        if self.variant != "proposed":
            doc["B"] = self.B.ravel().tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "KoopmanModel":
        n, m = int(doc["n"]), int(doc["m"])
        N = int(doc["feature_dim"])
        L = 2 * n + N
        A = np.asarray(doc["A"], dtype=float).reshape(L, L)
        B = None
        if "B" in doc:
            cols = m if doc["variant"] == "nlk" else L * m
            B = np.asarray(doc["B"], dtype=float).reshape(L, cols)
        return cls(variant=doc["variant"], convention=doc["state_convention"],
                   n=n, m=m, dt=float(doc["dt"]), A=A,
                   encoder=EncoderNetwork.from_dict(doc["encoder"]),
                   B=B, metadata=doc.get("metadata", {}))

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "KoopmanModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def count_learnable_params(model: KoopmanModel) -> int:
    """Trainable parameter ledger: encoder + A, plus B for the baselines.

    Follows the reduced-parameter accounting of the momentum formulation:
    the linear baseline adds (2n+N) m for its input matrix and the
    bilinear baseline adds (2n+N) m^2 for its per-channel input coupling.
    """
    L = model.lifted_dim
    count = model.encoder.num_params + L * L
    if model.variant == "nlk":
        count += L * model.m
    elif model.variant == "nbk":
        count += L * model.m * model.m
    return count


def to_explicit(states, model: KoopmanModel, manip: ManipulatorModel) -> np.ndarray:
    """Convert predicted states to (q, qd).

    Momentum-convention predictions are converted with M evaluated at
    the *predicted* q; explicit predictions pass through.
    """
    states = np.asarray(states, dtype=float)
    if model.convention == "explicit":
        return states
    n = model.n
    q, p = states[..., :n], states[..., n:]
    qd = velocity_from_momentum(manip, MomentumState(q=q, p=p))
    return np.concatenate([q, qd], axis=-1)


def standardized_error(pred, truth, manip: ManipulatorModel,
                       model: KoopmanModel | None = None) -> float:
    """Dimensionless rollout error for cross-convention comparison.

    Per-dimension RMSE over the trajectory divided by the ground-truth
    standard deviation of that dimension, averaged over dimensions.
    ``truth`` is always explicit (q, qd); ``pred`` is converted from the
    model's convention when a model is given.  Zero-variance truth
    dimensions are excluded with a warning.
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if model is not None:
        pred = to_explicit(pred, model, manip)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    rmse = np.sqrt(np.mean((pred - truth) ** 2, axis=0))
    std = np.std(truth, axis=0)
    keep = std > 1e-12
    if not np.all(keep):
        warnings.warn("excluding zero-variance ground-truth dimensions "
                      f"{np.where(~keep)[0].tolist()} from standardized error")
    if not np.any(keep):
        raise ValueError("ground truth has no variance in any dimension")
    return float(np.mean(rmse[keep] / std[keep]))
