"""Linear Generalized Extended State Observer over the Koopman model.

The observer runs alongside the controller, comparing the measured
physical state with the flow implied by the discrete Koopman model and
integrating the residual into a lumped disturbance estimate.  Scalar
gains k1, k2 act channelwise, giving per-channel error dynamics with
characteristic polynomial s^2 + k1 s + k2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .koopman import KoopmanModel


@dataclass
class GesoState:
    """Observer state: physical-state estimate and lumped disturbance."""

    x_hat: np.ndarray
    d_hat: np.ndarray
    k1: float
    k2: float

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float)
        self.d_hat = np.asarray(self.d_hat, dtype=float)
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("observer gains k1, k2 must be positive")

    @classmethod
    def initial(cls, x_meas, k1: float, k2: float) -> "GesoState":
        """Start from the first measurement with zero disturbance estimate."""
        x_meas = np.asarray(x_meas, dtype=float)
        return cls(x_hat=x_meas.copy(), d_hat=np.zeros_like(x_meas), k1=k1, k2=k2)


def model_flow(model: KoopmanModel, z, u) -> np.ndarray:
    """Continuous-rate surrogate of the model: C^x (A z + B u - z) / dt.

    Only the discrete (A, B) are ever identified, so the observer uses
    the one-step difference of the discrete model divided by dt in place
    of the continuous generator.
    """
    z_next = model.predict(z, u)
    return (model.recover(z_next) - model.recover(z)) / model.dt


def geso_update(obs: GesoState, x_meas, z, u, model: KoopmanModel,
                dt: float) -> GesoState:
    """One forward-Euler observer step at the control period dt.

    ``z`` must be the lift of the current measured state.  Returns a new
    GesoState; the input is not mutated.
    """
    x_meas = np.asarray(x_meas, dtype=float)
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x_meas)) and np.all(np.isfinite(z))
            and np.all(np.isfinite(u))):
        raise ValueError("observer inputs must be finite")
    if x_meas.shape != obs.x_hat.shape:
        raise ValueError(f"measurement has shape {x_meas.shape}, "
                         f"expected {obs.x_hat.shape}")
    innovation = x_meas - obs.x_hat
    x_dot = model_flow(model, z, u) + obs.k1 * innovation + obs.d_hat
    x_hat = obs.x_hat + dt * x_dot
    d_hat = obs.d_hat + dt * obs.k2 * innovation
    return GesoState(x_hat=x_hat, d_hat=d_hat, k1=obs.k1, k2=obs.k2)


def log_header(n_state: int) -> str:
    """CSV header of the observer log stream."""
    cols = ["t"]
    cols += [f"x_meas{i+1}" for i in range(n_state)]
    cols += [f"x_hat{i+1}" for i in range(n_state)]
    cols += [f"d_hat{i+1}" for i in range(n_state)]
    return ",".join(cols)


def log_row(t: float, x_meas, obs: GesoState) -> str:
    vals = [t, *np.asarray(x_meas, dtype=float), *obs.x_hat, *obs.d_hat]
    return ",".join(repr(float(v)) for v in vals)
