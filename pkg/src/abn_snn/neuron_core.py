"""Discrete-time LIF and SRM neurons.

Step functions are pure: they take a :class:`NeuronState` and return a new
one, so the same code drives plain simulation and autograd training.  The
spike nonlinearity is injected as ``spike_fn`` (Heaviside by default, a
surrogate during training).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

import torch

from .errors import ConfigError, NumericError

_REFRACTORY_EPS = 1e-9


@dataclass(frozen=True)
class LifParams:
    tau_m: float = 10.0
    e_l: float = 0.0
    r_m: float = 1.0
    v_reset: float = 0.0
    t_ref: float = 2.0

    def validate(self, dt: Optional[float] = None, theta_min: Optional[float] = None):
        if not self.tau_m > 0:
            raise ConfigError("tau_m must be positive")
        if self.t_ref < 0:
            raise ConfigError("t_ref must be non-negative")
        if theta_min is not None and not self.v_reset < theta_min:
            raise ConfigError(f"v_reset {self.v_reset} must lie below the minimum threshold {theta_min}")
        if dt is not None and dt > self.tau_m / 10:
            raise ConfigError(f"dt {dt} exceeds tau_m/10 = {self.tau_m / 10}")


@dataclass(frozen=True)
class SrmParams:
    tau_eps: float = 5.0
    tau_zeta: float = 5.0
    zeta_amp: float = -1.0

    def validate(self):
        if not (self.tau_eps > 0 and self.tau_zeta > 0):
            raise ConfigError("SRM kernel time constants must be positive")
        if self.zeta_amp > 0:
            raise ConfigError("zeta_amp must be <= 0 (hyperpolarising)")


@dataclass
class NeuronState:
    """Per-neuron membrane state; tensors share one shape.

    ``last_v`` is the previous step's pre-reset potential.  ``eps_trace`` and
    ``zeta_trace`` are only used by the SRM model.
    """

    v: torch.Tensor
    refractory_remaining: torch.Tensor
    last_v: torch.Tensor
    eps_trace: Optional[torch.Tensor] = None
    zeta_trace: Optional[torch.Tensor] = None
    threshold_state: Any = None

    @classmethod
    def resting(cls, shape, v0: float = 0.0, dtype=torch.float32, srm: bool = False) -> "NeuronState":
        v = torch.full(shape, float(v0), dtype=dtype)
        zeros = torch.zeros(shape, dtype=dtype)
        return cls(
            v=v,
            refractory_remaining=zeros.clone(),
            last_v=v.clone(),
            eps_trace=zeros.clone() if srm else None,
            zeta_trace=zeros.clone() if srm else None,
        )


def heaviside(x: torch.Tensor) -> torch.Tensor:
    return (x >= 0).to(x.dtype)


class RectSurrogate(torch.autograd.Function):
    """Heaviside forward; boxcar derivative of height 1/width on |x| < width/2."""

    @staticmethod
    def forward(ctx, x, width):
        ctx.save_for_backward(x)
        ctx.width = width
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        window = (x.abs() < ctx.width / 2).to(grad_output.dtype) / ctx.width
        return grad_output * window, None


def rect_surrogate(width: float = 1.0) -> Callable[[torch.Tensor], torch.Tensor]:
    def spike(x):
        return RectSurrogate.apply(x, width)
    return spike


def sigmoid_spike(slope: float = 4.0) -> Callable[[torch.Tensor], torch.Tensor]:
    """Fully smooth spike used for finite-difference gradient checks."""
    def spike(x):
        return torch.sigmoid(slope * x)
    return spike


def check_finite(x: torch.Tensor, what: str = "input"):
    if not torch.isfinite(x).all():
        flat = (~torch.isfinite(x.detach())).reshape(-1).nonzero()
        idx = int(flat[0])
        neuron = idx % x.shape[-1] if x.dim() else 0
        raise NumericError(f"non-finite {what} at neuron {neuron}", neuron_index=neuron)


def lif_step(state: NeuronState, params: LifParams, input_current, theta, dt: float,
             spike_fn: Callable = heaviside) -> tuple[NeuronState, torch.Tensor]:
    """Advance LIF neurons by one explicit-Euler step.

    Refractory neurons ignore their input and sit at ``v_reset`` while the
    clock counts down.  Returns the new state and the spike tensor.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    current = torch.as_tensor(input_current, dtype=state.v.dtype)
    check_finite(current, "input current")
    theta = torch.as_tensor(theta, dtype=state.v.dtype)

    refractory = state.refractory_remaining > 0
    integrated = state.v + (dt / params.tau_m) * (-(state.v - params.e_l) + params.r_m * current)
    v_pre = torch.where(refractory, torch.full_like(integrated, params.v_reset), integrated)
    spikes = spike_fn(v_pre - theta) * (~refractory).to(v_pre.dtype)
    v_next = v_pre * (1.0 - spikes) + params.v_reset * spikes

    counted_down = (state.refractory_remaining - dt).clamp(min=0.0)
    counted_down = torch.where(counted_down < _REFRACTORY_EPS, torch.zeros_like(counted_down), counted_down)
    fired = spikes.detach() > 0.5
    refr_next = torch.where(
        refractory, counted_down,
        torch.where(fired, torch.full_like(counted_down, params.t_ref), torch.zeros_like(counted_down)),
    )
    new_state = replace(state, v=v_next, refractory_remaining=refr_next, last_v=v_pre)
    return new_state, spikes


def srm_step(state: NeuronState, params: SrmParams, weighted_input, theta, dt: float,
             spike_fn: Callable = heaviside) -> tuple[NeuronState, torch.Tensor]:
    """Advance SRM neurons using exponential-kernel traces.

    ``weighted_input`` is the already-summed ``sum_i w_i s_i`` for this step.
    The refractory kernel is added after the spike, so it acts from the next
    step on.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    drive = torch.as_tensor(weighted_input, dtype=state.v.dtype)
    check_finite(drive, "weighted input")
    theta = torch.as_tensor(theta, dtype=state.v.dtype)
    eps = state.eps_trace if state.eps_trace is not None else torch.zeros_like(state.v)
    zeta = state.zeta_trace if state.zeta_trace is not None else torch.zeros_like(state.v)

    eps = eps * math.exp(-dt / params.tau_eps) + drive
    zeta = zeta * math.exp(-dt / params.tau_zeta)
    v = eps + zeta
    spikes = spike_fn(v - theta)
    zeta = zeta + params.zeta_amp * spikes
    new_state = replace(state, v=v, last_v=v, eps_trace=eps, zeta_trace=zeta)
    return new_state, spikes
