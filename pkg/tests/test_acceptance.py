"""Acceptance gate: one PASS/FAIL line per primary criterion.

Criteria defined on real N-MNIST read the dataset root from the
``ABN_NMNIST_ROOT`` environment variable (``Train/<digit>/*.bin`` and
``Test/<digit>/*.bin``) and fail when it is missing.  The same measurements
are repeated on the bundled N-MNIST-format stand-in and printed as
``[DIAGNOSTIC]`` lines, which report but never fail.
"""
import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from conftest import criterion

from abn_snn import config as config_mod
from abn_snn.adaptive_threshold import AbnParams, AbnState, abn_update, membrane_gradient, spike_efficiency, \
    threshold_rate, trg
from abn_snn.cli import main
from abn_snn.event_io import decode_nmnist, encode_nmnist, events_to_spikes, synth_poisson
from abn_snn.experiments import homeostasis_stats, labelled_data, run_ablate_components
from abn_snn.metrics import energy_from_telemetry
from abn_snn.network import NetworkConfig, PolicySpec, evaluate, init_network, make_optimizer, rate_logits, \
    train_epoch
from abn_snn.neuron_core import LifParams, NeuronState, SrmParams, lif_step, sigmoid_spike, srm_step


def _real_root():
    root = os.environ.get("ABN_NMNIST_ROOT", "")
    if not root or not (Path(root) / "Train").is_dir() or not (Path(root) / "Test").is_dir():
        raise FileNotFoundError(
            "real N-MNIST not available: set ABN_NMNIST_ROOT to a directory with Train/ and Test/")
    return Path(root)


# ---------------------------------------------------------------------------
# Equation unit suite
# ---------------------------------------------------------------------------


def test_equation_unit_suite():
    with criterion("equation unit suite: hand oracles and alpha->1 TRG reduction to 1e-12", limit_s=1.0) as c:
        p = AbnParams()
        state = AbnState.initial(p, (1,), torch.float64)
        checks = {
            "MG": (membrane_gradient(0.6, 0.4, 1.0, 0.5), 0.1),
            "G": (threshold_rate(1.1, 1.0, 1.0), 0.1),
            "TRG": (trg([0.1, 0.1, 0.1], 0.5, 3), 0.175 / 3),
            "SE": (spike_efficiency([6, 4], [2, 3]), 0.5),
            "update": (abn_update(state, p, 0.1, 0.05, 0.5).theta.item(), 1.125),
        }
        rng = np.random.default_rng(0)
        for trial in range(100):
            g = rng.uniform(-1, 1, int(rng.integers(1, 11))).tolist()
            checks[f"alpha->1 #{trial}"] = (trg(g, 1.0 - 1e-15, len(g)), math.fsum(g) / len(g))
        worst = max(abs(got - want) for got, want in checks.values())
        c.detail = f"max |error| {worst:.2e} over {len(checks)} checks"
        for name, (got, want) in checks.items():
            c.check(abs(got - want) <= 1e-12, f"{name}: {got!r} != {want!r}")


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

HAND_VECTORS = [
    (bytes([0x03, 0x04, 0x80, 0x00, 0x0A]), (3, 4, 1, 10)),
    (bytes([0x21, 0x00, 0x7F, 0xFF, 0xFF]), (33, 0, 0, 8388607)),
    (bytes([0x00, 0x21, 0x81, 0x02, 0x03]), (0, 33, 1, 66051)),
]


def _codec_check(c, files):
    for blob, (x, y, p, t) in HAND_VECTORS:
        e = next(iter(decode_nmnist(blob)))
        c.check((e.x, e.y, e.polarity, e.t) == (x, y, p, t), f"hand vector {blob.hex()} -> {e}")
    c.check(len(files) >= 100, f"only {len(files)} sample files")
    bad, events = [], 0
    for path in files:
        blob = path.read_bytes()
        stream = decode_nmnist(blob)
        events += len(stream)
        if encode_nmnist(stream) != blob:
            bad.append(path.name)
    c.check(not bad, f"{len(bad)} files not bit-exact, e.g. {bad[:3]}")
    c.detail = f"{len(files)} files, {events} events, {len(bad)} mismatches"


def test_codec_real_nmnist():
    with criterion("codec: bit-exact round-trip on >=100 real N-MNIST files + hand vectors", limit_s=5.0) as c:
        files = sorted(_real_root().glob("T*/*/*.bin"))[:100]
        _codec_check(c, files)


def test_codec_standin_diagnostic(standin_root):
    with criterion("codec round-trip on stand-in files", limit_s=5.0, tag="DIAGNOSTIC", enforce=False) as c:
        _codec_check(c, sorted(Path(standin_root).glob("T*/*/*.bin"))[:100])


# ---------------------------------------------------------------------------
# Neuron dynamics
# ---------------------------------------------------------------------------


def test_neuron_dynamics():
    with criterion("neuron dynamics: LIF leak convergence (1000 states), SRM vs brute force to 1e-9",
                   limit_s=10.0) as c:
        rng = np.random.default_rng(1)
        e_l = -0.1
        v0 = torch.as_tensor(rng.uniform(-10, 0.9, 1000))
        state = NeuronState(v=v0.clone(), refractory_remaining=torch.zeros(1000, dtype=torch.float64),
                            last_v=v0.clone())
        dist, sign = (v0 - e_l).abs(), torch.sign(v0 - e_l)
        monotone = True
        for _ in range(300):
            state, _ = lif_step(state, LifParams(e_l=e_l, v_reset=-1.0), torch.zeros(1000), 1e9, 1.0)
            new = (state.v - e_l).abs()
            # strict decrease until the gap reaches float64 resolution around E_L
            resolvable = dist > 1e-14
            monotone &= bool(torch.all(new <= dist)) and bool(torch.all(new[resolvable] < dist[resolvable]))
            monotone &= bool(torch.all(torch.sign(state.v - e_l)[new > 0] == sign[new > 0]))
            dist = new
        c.check(monotone, "LIF leak not monotone")
        c.check(dist.max().item() < 1e-10, f"LIF did not converge: {dist.max().item():.2e}")

        params = SrmParams(tau_eps=4.0, tau_zeta=3.0, zeta_amp=-1.5)
        worst, spikes_seen = 0.0, 0
        for seed in range(10):
            w = np.random.default_rng(seed).uniform(-0.3, 0.8, 100)
            st = NeuronState.resting((1,), dtype=torch.float64, srm=True)
            fired = []
            for t in range(100):
                ref = sum(w[s] * math.exp(-(t - s) / params.tau_eps) for s in range(t + 1))
                ref += sum(params.zeta_amp * math.exp(-(t - s) / params.tau_zeta) for s in fired)
                st, spk = srm_step(st, params, torch.tensor([w[t]], dtype=torch.float64), 1.2, 1.0)
                worst = max(worst, abs(st.v.item() - ref))
                if ref >= 1.2:
                    fired.append(t)
                c.check(bool(spk.item()) == (ref >= 1.2), f"SRM spike mismatch seed {seed} step {t}")
            spikes_seen += len(fired)
        c.check(worst <= 1e-9, f"SRM max error {worst:.2e}")
        c.detail = f"LIF max residual {dist.max().item():.1e}; SRM max error {worst:.1e} with {spikes_seen} spikes"


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def test_gradient_check():
    with criterion("gradient check: 4-4-2 smoothed net vs central differences, 50 probes, rel err <= 1e-4",
                   limit_s=30.0) as c:
        rng = np.random.default_rng(7)
        cfg = NetworkConfig.mlp([4, 4, 2], PolicySpec("fixed"), num_steps=15, dtype="float64",
                                lif=LifParams(t_ref=0.0), tau1=2.0, init_scale=6.0)
        net = init_network(cfg, seed=7)
        x = torch.as_tensor(rng.random((4, 15, 4)) < 0.4, dtype=torch.float64)
        y = torch.tensor([0, 1, 0, 1])
        spike = sigmoid_spike(4.0)

        def loss_fn():
            scores, _ = net(x, spike_fn=spike)
            return F.cross_entropy(rate_logits(scores, 15, 20.0), y)

        loss_fn().backward()
        grads = [w.grad.clone() for w in net.weights]
        worst, h = 0.0, 1e-6
        with torch.no_grad():
            for _ in range(50):
                l = int(rng.integers(0, 2))
                i, j = (int(rng.integers(0, n)) for n in net.weights[l].shape)
                w = net.weights[l]
                orig = w[i, j].item()
                w[i, j] = orig + h
                up = loss_fn().item()
                w[i, j] = orig - h
                down = loss_fn().item()
                w[i, j] = orig
                numeric, analytic = (up - down) / (2 * h), grads[l][i, j].item()
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        c.detail = f"max relative error {worst:.2e}"
        c.check(worst <= 1e-4, "relative error above 1e-4")


# ---------------------------------------------------------------------------
# Desk-scale learning
# ---------------------------------------------------------------------------


def _train_until(root, preset, kind, target, budget_s):
    cfg = config_mod.parse(f"[dataset]\nkind = nmnist\npath = {root}\npreset = {preset}\n[policy]\nkind = {kind}\n")
    train, test = labelled_data(cfg)
    net = init_network(cfg.network_config())
    tc = cfg.train_config()
    opt = make_optimizer(net, tc)
    start = time.perf_counter()
    acc = 0.0
    for epoch in range(tc.epochs):
        train_epoch(net, train, tc, opt, epoch, cfg.seed)
        acc = evaluate(net, test).accuracy
        elapsed = time.perf_counter() - start
        if acc >= target:
            return epoch + 1, acc, elapsed
        if elapsed > budget_s:
            break
    return None, acc, time.perf_counter() - start


def _learning_check(c, root):
    sizes = config_mod.defaults().network_config().sizes
    c.check(sizes == [1156, 128, 10], f"default sizes {sizes}")
    abn = _train_until(root, "nmnist-1k", "abn", 0.85, 1800)
    fixed = _train_until(root, "nmnist-1k", "fixed", 0.75, 1800)
    c.detail = (f"ABN reached {abn[1]:.3f} at epoch {abn[0]} in {abn[2]:.0f}s; "
                f"fixed reached {fixed[1]:.3f} at epoch {fixed[0]} in {fixed[2]:.0f}s")
    c.check(abn[0] is not None and abn[2] <= 1800, "ABN below 85% within 30 epochs / 30 min")
    c.check(fixed[0] is not None, "fixed-threshold control below 75% within 30 epochs")


def test_learning_real_nmnist():
    with criterion("desk-scale learning: nmnist-1k ABN >= 85%, fixed >= 75%, <= 30 epochs / 30 min") as c:
        _learning_check(c, _real_root())


def test_learning_standin_diagnostic(standin_1k_root):
    with criterion("desk-scale learning on nmnist-1k stand-in", tag="DIAGNOSTIC", enforce=False) as c:
        _learning_check(c, standin_1k_root)


# ---------------------------------------------------------------------------
# Homeostasis
# ---------------------------------------------------------------------------


def test_homeostasis_direction():
    with criterion("homeostasis: ABN dFR_m and dFR_m_std < fixed on base vs doubled Poisson, 5/5 seeds",
                   limit_s=300.0) as c:
        base = config_mod.parse("[run]\ncommand = homeostasis\n[dataset]\nkind = poisson\n")
        wins, notes = 0, []
        for seed in range(5):
            r = homeostasis_stats(base.with_overrides(run={"seed": seed}))["results"]
            fixed, abn = r[("fixed", "double", 1)][0].deltas, r[("abn", "double", 1)][0].deltas
            ok = abn.fr_m < fixed.fr_m and abn.fr_m_std < fixed.fr_m_std
            wins += ok
            notes.append(f"s{seed}:{abn.fr_m:.4f}/{fixed.fr_m:.4f},{abn.fr_m_std:.4f}/{fixed.fr_m_std:.4f}")
        c.detail = f"{wins}/5 seeds (abn/fixed dFR_m, dFR_m_std) " + " ".join(notes)
        c.check(wins == 5, f"only {wins}/5 seeds")


# ---------------------------------------------------------------------------
# Ablation shape
# ---------------------------------------------------------------------------


def _ablation_check(c, root, out):
    cfg = config_mod.parse(f"[run]\ncommand = ablate-components\n[dataset]\nkind = nmnist\npath = {root}\n"
                           f"preset = nmnist-100\n")
    cells = {cell["name"]: cell for cell in run_ablate_components(config_mod.validate(cfg), out)["cells"]}
    c.check(all(not cell["error"] for cell in cells.values()), "a cell diverged")
    all_ = cells["All"]
    c.detail = " ".join(f"{n}:{cell['accuracy']:.3f}/{cell['fr_m']:.4f}" for n, cell in cells.items()) \
        + " (acc/fr_m)"
    for single in ("MG", "TRG", "SE"):
        c.check(all_["accuracy"] >= cells[single]["accuracy"], f"All accuracy below {single}")
    lowest = min(cells, key=lambda n: cells[n]["fr_m"])
    c.check(all_["fr_m"] <= cells[lowest]["fr_m"], f"lowest firing rate is {lowest}, not All")


def test_ablation_real_nmnist(tmp_path):
    with criterion("ablation shape: All >= each single component, lowest firing rate (nmnist-100)",
                   limit_s=1200.0) as c:
        _ablation_check(c, _real_root(), tmp_path / "ablate")


def test_ablation_standin_diagnostic(standin_1k_root, tmp_path):
    with criterion("ablation shape on nmnist-100 stand-in", limit_s=1200.0, tag="DIAGNOSTIC", enforce=False) as c:
        _ablation_check(c, standin_1k_root, tmp_path / "ablate")


# ---------------------------------------------------------------------------
# Energy accounting
# ---------------------------------------------------------------------------


def test_energy_accounting():
    with criterion("energy: ac_count equals brute-force spike x fan-out recount; halved input halves ac_count") as c:
        cfg = NetworkConfig.mlp([200, 64, 10], PolicySpec("abn"), num_steps=100, init_scale=30.0)
        net = init_network(cfg, seed=0)
        streams = [synth_poisson(40, 200, 100_000, seed=s) for s in range(4)]
        x = torch.stack([events_to_spikes(s, 1000).to_tensor(100) for s in streams])
        _, tel = net(x, record_spikes=True)
        report = energy_from_telemetry(tel, "spike_count")
        brute = 0
        for stage, fan in enumerate(tel.fan_out):
            raster = tel.spike_rasters[stage].numpy()
            for b, t, n in zip(*np.nonzero(raster)):
                brute += fan
        c.check(report.ac_ops == brute, f"ac_ops {report.ac_ops} != brute force {brute}")

        halves = []
        for stream in streams:
            steps, neurons = events_to_spikes(stream, 1000).coordinates()
            n = len(steps) - len(steps) % 2
            full, half = torch.zeros(100, 200), torch.zeros(100, 200)
            full[steps[:n], neurons[:n]] = 1
            half[steps[:n:2], neurons[:n:2]] = 1
            halves.append((full, half))
        single = init_network(NetworkConfig.mlp([200, 10], PolicySpec("abn"), num_steps=100, init_scale=30.0), 0)
        ac_full = energy_from_telemetry(single(torch.stack([f for f, _ in halves]))[1], "spike_count").ac_ops
        ac_half = energy_from_telemetry(single(torch.stack([h for _, h in halves]))[1], "spike_count").ac_ops
        stage0 = [energy_from_telemetry(net(torch.stack([p[i] for p in halves]))[1], "spike_count").stage_ac_ops[0]
                  for i in (0, 1)]
        c.check(ac_full == 2 * ac_half, f"single-stage ac {ac_full} vs {ac_half}")
        c.check(stage0[0] == 2 * stage0[1], f"input-stage ac {stage0}")
        c.detail = f"recount {brute} == {report.ac_ops}; halving {ac_full} -> {ac_half}"


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_determinism(tmp_path, standin_root):
    with criterion("determinism: every command twice with same config and seed gives byte-identical output") as c:
        tiny = "[network]\nhidden = 12\nnum_steps = 25\n[train]\nepochs = 2\nbatch_size = 25\n"
        labelled = f"[dataset]\nkind = nmnist\npath = {standin_root}\npreset = nmnist-100\n{tiny}"
        synthetic = ("[dataset]\nkind = {kind}\nnum_neurons = 300\nduration_us = 150000\ntrials = 3\n"
                     "burst_windows_us = 50000-80000\n[network]\nhidden = 32\nnum_steps = 150\n")
        ckpt_dir = tmp_path / "ckpt"
        assert main(["train", "--config", str(_write(tmp_path / "ck.ini", labelled)), "--out", str(ckpt_dir)]) == 0
        runs = {
            "train": labelled,
            "eval": labelled + f"[run]\ncheckpoint = {ckpt_dir / 'checkpoint.bin'}\n",
            "sweep-weights": labelled + "[sweep]\nk_grid = 0.25 0.5 0.25; 0.5 0.75 0.5\n",
            "ablate-components": labelled.replace("epochs = 2", "epochs = 1"),
            "homeostasis": synthetic.format(kind="burst"),
            "spike-trace": synthetic.format(kind="ramp"),
        }
        same = []
        for command, text in runs.items():
            ini, out = _write(tmp_path / f"{command}.ini", text), tmp_path / command
            digests = []
            for _ in range(2):
                code = main([command, "--config", str(ini), "--out", str(out), "--seed", "5"])
                c.check(code == 0, f"{command} exited {code}")
                digests.append(_digest(out))
            c.check(digests[0] == digests[1], f"{command} output differs between runs")
            same.append(f"{command}:{'ok' if digests[0] == digests[1] else 'DIFF'}")
        c.detail = " ".join(same)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path
