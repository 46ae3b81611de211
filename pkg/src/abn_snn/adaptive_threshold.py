"""Per-neuron dynamic firing thresholds.

The ABN rule moves each neuron's threshold by a weighted sum of three terms::

    theta(t+1) = clamp(theta(t) + k1*MG - k2*TRG + k3*SE, theta_min, theta_max)

* MG, the membrane gradient: ``eta * (v(t) - v(t-1)) / dt``.
* TRG, the threshold retrospective gradient: a decayed window average of the
  threshold's own rate of change.
* SE, spike efficiency: output spikes over input spikes in the window.

All windows are fixed-length buffers, newest entry first, zero-filled at
start.  Zero padding leaves both the TRG sum (fixed ``1/N`` divisor) and the
SE ratio unchanged, so a partly filled buffer needs no special casing.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import torch

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class AbnParams:
    k1: float = 0.25
    k2: float = 0.5
    k3: float = 0.25
    eta: float = 0.5
    alpha: float = 0.9
    window_n: int = 10
    dt: float = 1.0
    theta_init: float = 1.0
    theta_min: float = 0.05
    theta_max: float = 10.0

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.eta < 1:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if self.window_n < 1:
            raise ConfigError("window_n must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.theta_min <= self.theta_init <= self.theta_max:
            raise ConfigError("need theta_min <= theta_init <= theta_max")
        if min(self.k1, self.k2, self.k3) < 0:
            raise ConfigError("k1, k2, k3 must be non-negative")
        return self

    def as_dict(self):
        return asdict(self)


@dataclass
class AbnState:
    """Threshold state for a tensor of neurons.

    History buffers have shape ``(window_n, *neuron_shape)``; index 0 is the
    most recent step.
    """

    theta: torch.Tensor
    prev_theta: torch.Tensor
    g_history: torch.Tensor
    c_in_history: torch.Tensor
    c_out_history: torch.Tensor

    @classmethod
    def initial(cls, params: AbnParams, shape, dtype=torch.float32) -> "AbnState":
        theta = torch.full(shape, float(params.theta_init), dtype=dtype)
        hist = torch.zeros((params.window_n, *shape), dtype=dtype)
        return cls(theta, theta.clone(), hist, hist.clone(), hist.clone())


def push(history: torch.Tensor, sample: torch.Tensor) -> torch.Tensor:
    """Shift a newest-first buffer and insert ``sample`` at the front."""
    return torch.cat([sample.unsqueeze(0).to(history.dtype), history[:-1]], dim=0)


# ---------------------------------------------------------------------------
# Rule components
# ---------------------------------------------------------------------------


def membrane_gradient(v_now, v_prev, dt: float, eta: float):
    return eta * (v_now - v_prev) / dt


def threshold_rate(theta_now, theta_prev, dt: float):
    return (theta_now - theta_prev) / dt


def decay_weights(alpha: float, length: int, dtype=torch.float64) -> torch.Tensor:
    return alpha ** torch.arange(length, dtype=dtype)


def trg(g_history, alpha: float, window_n: int):
    """Decay-weighted window average of threshold rates.

    ``g_history`` is newest-first.  The divisor is always ``window_n``, even
    while fewer samples are available.
    """
    if isinstance(g_history, torch.Tensor):
        m = g_history.shape[0]
        if m > window_n:
            raise ConfigError(f"history of {m} samples exceeds window {window_n}")
        if m == 0:
            return torch.zeros(g_history.shape[1:], dtype=g_history.dtype)
        w = decay_weights(alpha, m, g_history.dtype).reshape(-1, *([1] * (g_history.dim() - 1)))
        return (w * g_history).sum(dim=0) / window_n
    values = list(g_history)
    if len(values) > window_n:
        raise ConfigError(f"history of {len(values)} samples exceeds window {window_n}")
    return math.fsum(alpha ** j * g for j, g in enumerate(values)) / window_n


def spike_efficiency(c_in_history, c_out_history):
    """Windowed output/input spike ratio; 0 where no input arrived."""
    if isinstance(c_in_history, torch.Tensor):
        if c_in_history.shape != c_out_history.shape:
            raise ConfigError("c_in and c_out histories differ in shape")
        total_in = c_in_history.sum(dim=0)
        total_out = c_out_history.sum(dim=0)
        safe = torch.where(total_in > 0, total_in, torch.ones_like(total_in))
        return torch.where(total_in > 0, total_out / safe, torch.zeros_like(total_in))
    c_in, c_out = list(c_in_history), list(c_out_history)
    if len(c_in) != len(c_out):
        raise ConfigError("c_in and c_out histories differ in length")
    total_in = sum(c_in)
    return sum(c_out) / total_in if total_in else 0.0


def abn_update(state: AbnState, params: AbnParams, mg, trg_value, se) -> AbnState:
    """Apply one threshold step and record the clamped step's rate."""
    theta = state.theta
    raw = theta + params.k1 * mg - params.k2 * trg_value + params.k3 * se
    raw = torch.as_tensor(raw, dtype=theta.dtype)
    if not torch.isfinite(raw).all():
        idx = int((~torch.isfinite(raw)).reshape(-1).nonzero()[0])
        raise NumericError(f"non-finite threshold update at neuron {idx}", neuron_index=idx)
    new_theta = raw.clamp(params.theta_min, params.theta_max)
    g = threshold_rate(new_theta, theta, params.dt)
    return replace(state, theta=new_theta, prev_theta=theta, g_history=push(state.g_history, g))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class ThresholdPolicy:
    """Owns threshold state creation and the per-step update hook."""

    kind = "base"

    def __init__(self, params: AbnParams):
        self.params = params.validate()

    def init_state(self, shape, dtype=torch.float32) -> AbnState:
        return AbnState.initial(self.params, shape, dtype)

    def step(self, state: AbnState, v_now, v_prev, c_in, c_out) -> AbnState:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params.as_dict()}


class FixedThreshold(ThresholdPolicy):
    """Constant threshold at ``theta_init``."""

    kind = "fixed"

    def step(self, state, v_now, v_prev, c_in, c_out):
        return state


class AbnThreshold(ThresholdPolicy):
    kind = "abn"

    def step(self, state: AbnState, v_now, v_prev, c_in, c_out) -> AbnState:
        p = self.params
        c_in_hist = push(state.c_in_history, torch.as_tensor(c_in).expand_as(state.theta))
        c_out_hist = push(state.c_out_history, torch.as_tensor(c_out).expand_as(state.theta))
        mg = membrane_gradient(v_now, v_prev, p.dt, p.eta)
        trg_value = trg(state.g_history, p.alpha, p.window_n)
        se = spike_efficiency(c_in_hist, c_out_hist)
        state = replace(state, c_in_history=c_in_hist, c_out_history=c_out_hist)
        return abn_update(state, p, mg, trg_value, se)


class MaskedAbnThreshold(AbnThreshold):
    """ABN with excluded components realised as zero weights."""

    kind = "abn_masked"

    def __init__(self, params: AbnParams, use_mg=True, use_trg=True, use_se=True):
        if not (use_mg or use_trg or use_se):
            raise ConfigError("abn_masked needs at least one enabled component")
        self.mask = (bool(use_mg), bool(use_trg), bool(use_se))
        super().__init__(replace(
            params,
            k1=params.k1 if use_mg else 0.0,
            k2=params.k2 if use_trg else 0.0,
            k3=params.k3 if use_se else 0.0,
        ))

    def describe(self):
        d = super().describe()
        d.update(use_mg=self.mask[0], use_trg=self.mask[1], use_se=self.mask[2])
        return d


def make_policy(kind: str, params: Optional[AbnParams] = None, use_mg: bool = True,
                use_trg: bool = True, use_se: bool = True) -> ThresholdPolicy:
    params = params or AbnParams()
    if kind == "fixed":
        return FixedThreshold(params)
    if kind == "abn":
        return AbnThreshold(params)
    if kind == "abn_masked":
        return MaskedAbnThreshold(params, use_mg, use_trg, use_se)
    raise ConfigError(f"unknown threshold policy {kind!r}")


# name -> (use_mg, use_trg, use_se), in reporting order
ABLATION_MASKS = {
    "MG": (True, False, False),
    "TRG": (False, True, False),
    "SE": (False, False, True),
    "MG+TRG": (True, True, False),
    "TRG+SE": (False, True, True),
    "MG+SE": (True, False, True),
    "All": (True, True, True),
}


def write_theta_trace(path, traces: Sequence[torch.Tensor]) -> None:
    """Write ``step neuron theta`` rows from per-step threshold vectors."""
    with open(path, "w") as fh:
        fh.write("step\tneuron\ttheta\n")
        for step, theta in enumerate(traces):
            for neuron, value in enumerate(torch.as_tensor(theta).reshape(-1).tolist()):
                fh.write(f"{step}\t{neuron}\t{value:.9g}\n")
