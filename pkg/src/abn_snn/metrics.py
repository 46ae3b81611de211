"""Firing-rate homeostasis statistics and MAC/AC energy accounting.

Firing rate is spikes per neuron per simulation step, so every rate lies in
[0, 1].  Standard deviations are population (divisor = count).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

# 45 nm figures common in the SNN energy literature, in joules per operation
E_MAC_DEFAULT = 4.6e-12
E_AC_DEFAULT = 0.9e-12


@dataclass(frozen=True)
class Deltas:
    fr_m: float
    fr_m_std: float
    fr_s_std: float


@dataclass(frozen=True)
class FiringStats:
    fr_m: float
    fr_m_std: float
    fr_s_std: float
    num_steps: int
    deltas: Optional[Deltas] = None

    def against(self, reference: "FiringStats") -> "FiringStats":
        return FiringStats(self.fr_m, self.fr_m_std, self.fr_s_std, self.num_steps,
                           compare_runs(reference, self))


def firing_stats(spike_counts, num_steps: int) -> FiringStats:
    """Homeostasis statistics from a (trials, neurons) spike-count array.

    * ``fr_m``: mean rate over all neurons and trials.
    * ``fr_m_std``: mean over trials of the across-neuron rate std.
    * ``fr_s_std``: std over trials of that across-neuron std.
    """
    if num_steps <= 0:
        raise ConfigError("num_steps must be positive")
    counts = np.asarray(spike_counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 1 or counts.shape[1] < 1:
        raise ConfigError("spike counts must be a non-empty (trials, neurons) array")
    rates = counts / num_steps
    per_trial_std = rates.std(axis=1)
    return FiringStats(
        fr_m=float(rates.mean()),
        fr_m_std=float(per_trial_std.mean()),
        fr_s_std=float(per_trial_std.std()),
        num_steps=num_steps,
    )


def compare_runs(reference: FiringStats, degraded: FiringStats) -> Deltas:
    if reference.num_steps != degraded.num_steps:
        raise ConfigError(
            f"runs differ in length ({reference.num_steps} vs {degraded.num_steps} steps)"
        )
    return Deltas(
        fr_m=abs(degraded.fr_m - reference.fr_m),
        fr_m_std=abs(degraded.fr_m_std - reference.fr_m_std),
        fr_s_std=abs(degraded.fr_s_std - reference.fr_s_std),
    )


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = E_MAC_DEFAULT
    e_ac: float = E_AC_DEFAULT
    freq: float = 1.0


@dataclass(frozen=True)
class EnergyReport:
    """Per-inference operation counts in millions and the implied power.

    ``ac_ops`` and ``mac_ops`` keep the exact integer totals over all
    inferences; ``stage_ac_ops`` splits ``ac_ops`` by synaptic stage.
    """

    mac_count: float
    ac_count: float
    power_w: float
    ac_ops: int
    mac_ops: int
    num_inferences: int
    stage_ac_ops: tuple = field(default_factory=tuple)

    def lines(self) -> list[str]:
        out = [
            f"mac_count\t{self.mac_count:.9g}\tMOps/inference",
            f"ac_count\t{self.ac_count:.9g}\tMOps/inference",
            f"power_w\t{self.power_w:.9g}\tW",
            f"ac_ops_total\t{self.ac_ops}\tops",
            f"mac_ops_total\t{self.mac_ops}\tops",
            f"inferences\t{self.num_inferences}\tcount",
        ]
        out += [f"ac_ops_stage{i}\t{v}\tops" for i, v in enumerate(self.stage_ac_ops)]
        return out


def readout_macs(num_classes: int, num_steps: int, readout: str) -> int:
    """Dense operations of the readout stage for one inference.

    A spike-count readout only compares the final class scores; a membrane
    readout integrates every output potential at every step.
    """
    return num_classes * (num_steps if readout == "membrane" else 1)


def energy_report(presyn_totals: Sequence[int], fan_out: Sequence[int], num_inferences: int,
                  readout_mac_per_inference: int, constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Count accumulates driven by spikes and the remaining dense MACs.

    Each presynaptic spike into stage ``l`` costs ``fan_out[l]`` accumulates.
    """
    if num_inferences < 1:
        raise ConfigError("energy accounting needs at least one forward pass")
    if len(presyn_totals) != len(fan_out):
        raise ConfigError("need one presynaptic total per stage")
    stage = tuple(int(p) * int(f) for p, f in zip(presyn_totals, fan_out))
    ac_ops = sum(stage)
    mac_ops = int(readout_mac_per_inference) * num_inferences
    ac_m = ac_ops / num_inferences / 1e6
    mac_m = mac_ops / num_inferences / 1e6
    power = (mac_m * 1e6 * constants.e_mac + ac_m * 1e6 * constants.e_ac) * constants.freq
    return EnergyReport(mac_m, ac_m, power, ac_ops, mac_ops, num_inferences, stage)


def energy_from_eval(result, readout: str, constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Energy report from a :class:`~abn_snn.network.EvalResult`."""
    macs = readout_macs(result.fan_out[-1], result.num_steps, readout)
    return energy_report(result.presyn_totals, result.fan_out, result.num_inferences, macs, constants)


def energy_from_telemetry(telemetry, readout: str, constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    presyn = [int(p.sum().item()) for p in telemetry.presyn_step_counts]
    macs = readout_macs(telemetry.fan_out[-1], telemetry.num_steps, readout)
    return energy_report(presyn, telemetry.fan_out, telemetry.batch_size, macs, constants)


def stats_lines(stats: FiringStats) -> list[str]:
    out = [
        f"fr_m\t{stats.fr_m:.9g}\tspikes/step",
        f"fr_m_std\t{stats.fr_m_std:.9g}\tspikes/step",
        f"fr_s_std\t{stats.fr_s_std:.9g}\tspikes/step",
    ]
    if stats.deltas is not None:
        out += [
            f"delta_fr_m\t{stats.deltas.fr_m:.9g}\tspikes/step",
            f"delta_fr_m_std\t{stats.deltas.fr_m_std:.9g}\tspikes/step",
            f"delta_fr_s_std\t{stats.deltas.fr_s_std:.9g}\tspikes/step",
        ]
    return out
