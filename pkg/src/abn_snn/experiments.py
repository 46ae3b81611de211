"""Experiment commands behind the ``abn-snn`` CLI.

Each command writes one run directory::

    config.resolved  metrics.tsv  theta_trace.tsv  spikes.tsv  energy.tsv  table.txt

Files depend only on the configuration and seed.  Multi-cell commands (weight
sweep, ablation) run their cells as independent jobs and merge results in
grid order.
"""
from __future__ import annotations

import functools
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import config as config_mod
from .adaptive_threshold import ABLATION_MASKS
from .config import RunConfig
from .errors import AbnError, ConfigError
from .event_io import (EventStream, events_to_spikes, load_nmnist, synth_burst, synth_poisson,
                       synth_ramp)
from .metrics import (EnergyReport, energy_from_eval, energy_from_telemetry, firing_stats,
                      stats_lines)
from .network import (EvalResult, PolicySpec, SpikingMLP, evaluate, init_network, load_checkpoint,
                      make_optimizer, rasterize, save_checkpoint, train_epoch)

log = logging.getLogger(__name__)

OUTPUT_FILES = ("config.resolved", "metrics.tsv", "theta_trace.tsv", "spikes.tsv", "energy.tsv", "table.txt")


def _f(x) -> str:
    return "nan" if x is None else f"{x:.9g}"


def _fixed_width(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def _tsv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    return "\n".join(["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]) + "\n"


def _theta_rows(trace: Optional[list], prefix=()) -> list[list]:
    """``step neuron theta`` rows; neurons numbered across layers."""
    if not trace:
        return []
    stacked = torch.cat([t.reshape(t.shape[0], -1) for t in trace], dim=1).tolist()
    return [[*prefix, step, n, _f(v)] for step, row in enumerate(stacked) for n, v in enumerate(row)]


def _spike_rows(step_spikes: np.ndarray, prefix=()) -> list[list]:
    return [[*prefix, step, layer, int(step_spikes[step, layer])]
            for step in range(step_spikes.shape[0]) for layer in range(step_spikes.shape[1])]


def _energy_rows(report: EnergyReport, prefix=()) -> list[list]:
    return [[*prefix, *line.split("\t")] for line in report.lines()]


def _map(fn: Callable, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _nmnist_samples(path: str, preset: str, dt_ms: float):
    train, test = load_nmnist(path, preset)
    return rasterize(train, dt_ms), rasterize(test, dt_ms)


def labelled_data(cfg: RunConfig):
    d = cfg["dataset"]
    return _nmnist_samples(str(Path(d["path"]).resolve()), d["preset"], d["dt_ms"])


def synthetic_streams(cfg: RunConfig, condition: str = "base") -> list[EventStream]:
    """Trial streams for a synthetic workload; trial ``k`` uses seed ``seed*1000 + k``."""
    d = cfg["dataset"]
    rate = d["rate_hz"]
    kind = d["kind"]
    if condition == "double":
        rate *= 2
    elif condition == "sparse":
        rate /= 2
    elif condition == "burst":
        kind = "burst"
    streams = []
    for k in range(d["trials"]):
        seed = cfg.seed * 1000 + k
        if kind == "poisson":
            s = synth_poisson(rate, d["num_neurons"], d["duration_us"], seed)
        elif kind == "burst":
            s = synth_burst(rate, rate * d["burst_factor"], cfg.burst_windows(), d["num_neurons"],
                            d["duration_us"], seed)
        elif kind == "ramp":
            s = synth_ramp(rate, d["end_rate_hz"], d["num_neurons"], d["duration_us"], seed)
        else:
            raise ConfigError(f"dataset kind {kind!r} is not synthetic")
        streams.append(s)
    return streams


def stream_batch(cfg: RunConfig, streams: Sequence[EventStream]) -> torch.Tensor:
    steps = cfg["network"]["num_steps"]
    dt_us = cfg["dataset"]["dt_ms"] * 1000.0
    return torch.stack([events_to_spikes(s, dt_us).to_tensor(steps) for s in streams])


# ---------------------------------------------------------------------------
# Training cells
# ---------------------------------------------------------------------------


def train_and_evaluate(cfg: RunConfig, policy: PolicySpec, per_epoch_eval: bool = False):
    """Train a fresh network under ``policy``; returns (net, history, eval result)."""
    torch.set_num_threads(1)
    train_set, test_set = labelled_data(cfg)
    net = init_network(cfg.network_config(policy))
    tc = cfg.train_config()
    opt = make_optimizer(net, tc)
    history = []
    for epoch in range(tc.epochs):
        _, loss, acc = train_epoch(net, train_set, tc, opt, epoch=epoch, seed=cfg.seed)
        test_acc = evaluate(net, test_set).accuracy if per_epoch_eval else None
        history.append((epoch, loss, acc, test_acc))
        log.info("epoch %d loss %.4f train_acc %.3f test_acc %s", epoch, loss, acc, test_acc)
    result = evaluate(net, test_set, trace_first=True)
    return net, history, result


def _cell_job(job) -> dict:
    values, policy_dict, name = job
    cfg = RunConfig(values)
    policy = PolicySpec.from_dict(policy_dict)
    try:
        _, history, result = train_and_evaluate(cfg, policy)
    except AbnError as exc:
        return {"name": name, "error": f"{type(exc).__name__}: {exc}"}
    stats = firing_stats(result.neuron_counts, result.num_steps)
    energy = energy_from_eval(result, cfg["network"]["readout"], cfg.energy_constants())
    return {
        "name": name, "error": "", "accuracy": result.accuracy, "fr_m": stats.fr_m,
        "final_loss": history[-1][1] if history else None,
        "theta": _theta_rows(result.theta_trace, (name,)),
        "spikes": _spike_rows(result.step_spikes, (name,)),
        "energy": _energy_rows(energy, (name,)),
    }


def _policy_with(cfg: RunConfig, kind="abn", k=None, mask=(True, True, True)) -> PolicySpec:
    params = cfg.abn_params()
    if k is not None:
        params = replace(params, k1=k[0], k2=k[1], k3=k[2])
    return PolicySpec(kind, params, *mask)


def _write(out: Path, cfg: RunConfig, metrics: str, theta: str, spikes: str, energy: str, table: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config_mod.render(cfg))
    (out / "metrics.tsv").write_text(metrics)
    (out / "theta_trace.tsv").write_text(theta)
    (out / "spikes.tsv").write_text(spikes)
    (out / "energy.tsv").write_text(energy)
    (out / "table.txt").write_text(table)


def _single_run_outputs(cfg: RunConfig, out: Path, history, result: EvalResult, title: str):
    stats = firing_stats(result.neuron_counts, result.num_steps)
    energy = energy_from_eval(result, cfg["network"]["readout"], cfg.energy_constants())
    metric_rows = [["epoch", e, "loss", _f(l)] for e, l, _, _ in history]
    metric_rows += [["epoch", e, "train_accuracy", _f(a)] for e, _, a, _ in history]
    metric_rows += [["epoch", e, "test_accuracy", _f(t)] for e, _, _, t in history if t is not None]
    metric_rows += [["final", "-", "test_accuracy", _f(result.accuracy)]]
    metric_rows += [["final", "-", *line.split("\t")[:2]] for line in stats_lines(stats)]
    table = f"{title}\n\n" + _fixed_width(
        ["metric", "value"],
        [["test accuracy", f"{result.accuracy:.4f}"], ["FR_m", f"{stats.fr_m:.6f}"],
         ["FR_m_std", f"{stats.fr_m_std:.6f}"], ["FR_s_std", f"{stats.fr_s_std:.6f}"],
         ["AC (M/inference)", f"{energy.ac_count:.6f}"], ["MAC (M/inference)", f"{energy.mac_count:.6f}"],
         ["power (W)", f"{energy.power_w:.6g}"]],
    )
    _write(out, cfg,
           _tsv(["scope", "epoch", "metric", "value"], metric_rows),
           _tsv(["step", "neuron", "theta"], _theta_rows(result.theta_trace)),
           _tsv(["step", "layer", "spikes"], _spike_rows(result.step_spikes)),
           _tsv(["name", "value", "unit"], _energy_rows(energy)),
           table)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig, out: Path) -> dict:
    net, history, result = train_and_evaluate(cfg, cfg.policy_spec(), per_epoch_eval=True)
    _single_run_outputs(cfg, out, history, result, f"train: {cfg['policy']['kind']} policy")
    save_checkpoint(net, out / "checkpoint.bin")
    return {"accuracy": result.accuracy}


def run_eval(cfg: RunConfig, out: Path) -> dict:
    torch.set_num_threads(1)
    net = load_checkpoint(cfg["run"]["checkpoint"])
    _, test_set = labelled_data(cfg)
    result = evaluate(net, test_set, trace_first=True)
    _single_run_outputs(cfg, out, [], result, "eval")
    return {"accuracy": result.accuracy}


def _cell_table(cfg: RunConfig, out: Path, cells: list[dict], key_cols: list[str], keys: list[list], title: str):
    ok = [c for c in cells if not c["error"]]
    best = max(ok, key=lambda c: c["accuracy"])["name"] if ok else None
    rows, metric_rows = [], []
    for c, k in zip(cells, keys):
        acc = "diverged" if c["error"] else f"{100 * c['accuracy']:.2f}"
        fr = "-" if c["error"] else f"{c['fr_m']:.4f}"
        rows.append([c["name"], *k, acc, fr, "*" if c["name"] == best else ""])
        metric_rows.append([c["name"], *k, _f(c.get("accuracy")), _f(c.get("fr_m")),
                            int(c["name"] == best), c["error"] or "-"])
    table = f"{title}\n\n" + _fixed_width(["row", *key_cols, "Acc.", "F. Rate", "best"], rows)
    _write(out, cfg,
           _tsv(["row", *key_cols, "accuracy", "firing_rate", "best", "error"], metric_rows),
           _tsv(["row", "step", "neuron", "theta"], [r for c in ok for r in c["theta"]]),
           _tsv(["row", "step", "layer", "spikes"], [r for c in ok for r in c["spikes"]]),
           _tsv(["row", "name", "value", "unit"], [r for c in ok for r in c["energy"]]),
           table)
    return {"best": best, "cells": [{k: c.get(k) for k in ("name", "accuracy", "fr_m", "error")} for c in cells]}


def run_sweep_weights(cfg: RunConfig, out: Path) -> dict:
    grid = cfg.k_grid()
    jobs = [(cfg.values, _policy_with(cfg, "abn", k).to_dict(), f"k{i}") for i, k in enumerate(grid)]
    cells = _map(_cell_job, jobs, cfg["run"]["workers"])
    keys = [[_f(k1), _f(k2), _f(k3)] for k1, k2, k3 in grid]
    return _cell_table(cfg, out, cells, ["K1", "K2", "K3"], keys, "weight sweep (ABN)")


def ablation_policies(cfg: RunConfig) -> list[tuple[str, PolicySpec]]:
    """The seven component masks; "All" is the plain unmasked ABN policy."""
    out = []
    for name, mask in ABLATION_MASKS.items():
        kind = "abn" if all(mask) else "abn_masked"
        out.append((name, _policy_with(cfg, kind, mask=mask)))
    return out


def run_ablate_components(cfg: RunConfig, out: Path) -> dict:
    pols = ablation_policies(cfg)
    jobs = [(cfg.values, p.to_dict(), name) for name, p in pols]
    cells = _map(_cell_job, jobs, cfg["run"]["workers"])
    keys = []
    for _, p in pols:
        built = p.build(cfg["dataset"]["dt_ms"]).params
        keys.append([_f(built.k1), _f(built.k2), _f(built.k3)])
    return _cell_table(cfg, out, cells, ["K1", "K2", "K3"], keys, "component ablation")


def _synthetic_net(cfg: RunConfig, policy: PolicySpec) -> SpikingMLP:
    net = init_network(cfg.network_config(policy))
    ckpt = cfg["run"]["checkpoint"]
    if ckpt:
        trained = load_checkpoint(ckpt)
        with torch.no_grad():
            for w, src in zip(net.weights, trained.weights):
                if w.shape != src.shape:
                    raise ConfigError(f"checkpoint weight shape {tuple(src.shape)} != {tuple(w.shape)}")
                w.copy_(src.to(w.dtype))
    return net


@torch.no_grad()
def _simulate(cfg: RunConfig, policy: PolicySpec, x: torch.Tensor, record_theta=False):
    net = _synthetic_net(cfg, policy)
    _, tel = net(x, record_theta=record_theta)
    return tel


def homeostasis_stats(cfg: RunConfig) -> dict:
    """FiringStats per (policy, condition); degraded conditions carry deltas."""
    torch.set_num_threads(1)
    reference, degraded = cfg.homeostasis_conditions()
    conditions = [reference, *degraded]
    batches = {c: stream_batch(cfg, synthetic_streams(cfg, c)) for c in dict.fromkeys(conditions)}
    policies = {"fixed": _policy_with(cfg, "fixed"), "abn": cfg.policy_spec()}
    results = {}
    for pname, pol in policies.items():
        ref_stats = None
        for i, cond in enumerate(conditions):
            tel = _simulate(cfg, pol, batches[cond], record_theta=(pname == "abn" and i == 0))
            stats = firing_stats(tel.neuron_spike_counts().numpy(), tel.num_steps)
            if i == 0:
                ref_stats = stats
            else:
                stats = stats.against(ref_stats)
            results[(pname, cond, i)] = (stats, tel)
    return {"conditions": conditions, "results": results}


def run_homeostasis(cfg: RunConfig, out: Path) -> dict:
    data = homeostasis_stats(cfg)
    header = ["FR_m", "dFR_m", "FR_m_std", "dFR_m_std", "FR_s_std", "dFR_s_std"]
    rows, metric_rows, spike_rows, energy_rows, theta = [], [], [], [], ""
    summary = {}
    for (pname, cond, i), (stats, tel) in data["results"].items():
        label = cond if i == 0 else f"{cond} vs {data['conditions'][0]}"
        d = stats.deltas
        rows.append([pname, label, f"{stats.fr_m:.6f}", "" if d is None else f"{d.fr_m:.6f}",
                     f"{stats.fr_m_std:.6f}", "" if d is None else f"{d.fr_m_std:.6f}",
                     f"{stats.fr_s_std:.6f}", "" if d is None else f"{d.fr_s_std:.6f}"])
        metric_rows.append([pname, cond, _f(stats.fr_m), _f(d and d.fr_m), _f(stats.fr_m_std),
                            _f(d and d.fr_m_std), _f(stats.fr_s_std), _f(d and d.fr_s_std)])
        steps = np.stack([s.sum(dim=0).numpy() for s in tel.layer_step_spikes], axis=1).astype(np.int64)
        spike_rows += _spike_rows(steps, (pname, cond))
        energy_rows += _energy_rows(energy_from_telemetry(tel, cfg["network"]["readout"],
                                                          cfg.energy_constants()), (pname, cond))
        if tel.theta_traces is not None:
            theta = _tsv(["step", "neuron", "theta"], _theta_rows([t[0] for t in tel.theta_traces]))
        summary[(pname, cond)] = stats
    table = "homeostasis (rates in spikes/step)\n\n" + _fixed_width(["policy", "condition", *header], rows)
    _write(out, cfg,
           _tsv(["policy", "condition", "fr_m", "delta_fr_m", "fr_m_std", "delta_fr_m_std", "fr_s_std",
                 "delta_fr_s_std"], metric_rows),
           theta or _tsv(["step", "neuron", "theta"], []),
           _tsv(["policy", "condition", "step", "layer", "spikes"], spike_rows),
           _tsv(["policy", "condition", "name", "value", "unit"], energy_rows),
           table)
    return {"stats": summary}


TRACE_ARMS = {"MG": (True, False, False), "TRG": (False, True, False), "SE": (False, False, True)}


def spike_trace_series(cfg: RunConfig) -> dict:
    """Per-step firing rate (mean over non-input neurons and trials) per arm."""
    torch.set_num_threads(1)
    x = stream_batch(cfg, synthetic_streams(cfg, "base"))
    arms = {name: _policy_with(cfg, "abn_masked", mask=m) for name, m in TRACE_ARMS.items()}
    arms["fixed"] = _policy_with(cfg, "fixed")
    series = {}
    for name, pol in arms.items():
        tel = _simulate(cfg, pol, x, record_theta=True)
        n_neurons = sum(tel.fan_out)
        per_step = torch.stack(tel.layer_step_spikes, dim=0).sum(dim=0).sum(dim=0)
        series[name] = (per_step / (n_neurons * tel.batch_size)).numpy().astype(np.float64), tel
    return series


def run_spike_trace(cfg: RunConfig, out: Path) -> dict:
    series = spike_trace_series(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows, metric_rows, spike_rows, energy_rows, theta_rows = [], [], [], [], []
    for name, (rate, tel) in series.items():
        (out / f"trace_{name}.tsv").write_text(_tsv(["step", "firing_rate"], [[i, _f(r)] for i, r in enumerate(rate)]))
        q = max(1, len(rate) // 4)
        early, late = float(rate[:q].mean()), float(rate[-q:].mean())
        rows.append([name, f"{rate.mean():.6f}", f"{early:.6f}", f"{late:.6f}"])
        metric_rows.append([name, _f(rate.mean()), _f(early), _f(late)])
        steps = np.stack([s.sum(dim=0).numpy() for s in tel.layer_step_spikes], axis=1).astype(np.int64)
        spike_rows += _spike_rows(steps, (name,))
        energy_rows += _energy_rows(energy_from_telemetry(tel, cfg["network"]["readout"], cfg.energy_constants()),
                                    (name,))
        theta_rows += _theta_rows([t[0] for t in tel.theta_traces], (name,))
    table = "spike activity per ABN component (rates in spikes/step)\n\n" + _fixed_width(
        ["arm", "mean", "first quarter", "last quarter"], rows)
    _write(out, cfg,
           _tsv(["arm", "mean_rate", "early_rate", "late_rate"], metric_rows),
           _tsv(["arm", "step", "neuron", "theta"], theta_rows),
           _tsv(["arm", "step", "layer", "spikes"], spike_rows),
           _tsv(["arm", "name", "value", "unit"], energy_rows),
           table)
    return {"series": {k: v[0] for k, v in series.items()}}


COMMAND_TABLE = {
    "train": run_train,
    "eval": run_eval,
    "sweep-weights": run_sweep_weights,
    "ablate-components": run_ablate_components,
    "homeostasis": run_homeostasis,
    "spike-trace": run_spike_trace,
}


def run(cfg: RunConfig, out: Optional[Path] = None) -> dict:
    config_mod.validate(cfg)
    out = Path(out or cfg["run"]["output_dir"])
    return COMMAND_TABLE[cfg.command](cfg, out)
