"""Fully connected spiking MLP with per-neuron threshold policies.

Simulation runs in discrete steps.  At every step each layer receives the
current step's spikes of the layer below through a synaptic trace, advances
its neurons, then updates its thresholds.  Training unrolls this loop and
backpropagates through time with a surrogate spike derivative.  Thresholds
are computed under ``no_grad`` and enter the graph as constants.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adaptive_threshold import AbnParams, ThresholdPolicy, make_policy
from .errors import ConfigError, DecodeError, DivergenceError
from .event_io import EventStream, SpikeRaster, events_to_spikes
from .neuron_core import LifParams, NeuronState, SrmParams, heaviside, lif_step, rect_surrogate, srm_step

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class PolicySpec:
    kind: str = "abn"
    params: AbnParams = field(default_factory=AbnParams)
    use_mg: bool = True
    use_trg: bool = True
    use_se: bool = True

    def build(self, dt: float) -> ThresholdPolicy:
        return make_policy(self.kind, replace(self.params, dt=dt), self.use_mg, self.use_trg, self.use_se)

    def to_dict(self):
        return {"kind": self.kind, "params": asdict(self.params), "use_mg": self.use_mg,
                "use_trg": self.use_trg, "use_se": self.use_se}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], AbnParams(**d["params"]), d["use_mg"], d["use_trg"], d["use_se"])


@dataclass
class LayerSpec:
    in_size: int
    out_size: int
    neuron_model: str = "lif"
    policy: PolicySpec = field(default_factory=PolicySpec)
    weights: Optional[torch.Tensor] = None


@dataclass
class NetworkConfig:
    layers: list
    dt: float = 1.0
    num_steps: int = 300
    readout: str = "spike_count"
    seed: int = 0
    lif: LifParams = field(default_factory=LifParams)
    srm: SrmParams = field(default_factory=SrmParams)
    tau1: float = 0.1
    init_scale: float = 1.0
    dtype: str = "float32"

    @classmethod
    def mlp(cls, sizes: Sequence[int], policy: Optional[PolicySpec] = None, neuron_model="lif", **kw):
        policy = policy or PolicySpec()
        layers = [LayerSpec(a, b, neuron_model, policy) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(layers=layers, **kw)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].in_size] + [l.out_size for l in self.layers]

    def validate(self, input_size: Optional[int] = None) -> "NetworkConfig":
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.in_size < 1 or layer.out_size < 1:
                raise ConfigError(f"layer {i} has an empty side ({layer.in_size}x{layer.out_size})")
            if layer.neuron_model not in ("lif", "srm"):
                raise ConfigError(f"layer {i}: unknown neuron model {layer.neuron_model!r}")
            if i and layer.in_size != self.layers[i - 1].out_size:
                raise ConfigError(
                    f"layer {i - 1} emits {self.layers[i - 1].out_size} outputs, layer {i} expects {layer.in_size}"
                )
            layer.policy.build(self.dt)
            if layer.neuron_model == "lif":
                self.lif.validate(self.dt, layer.policy.params.theta_min)
            else:
                self.srm.validate()
        if input_size is not None and input_size != self.layers[0].in_size:
            raise ConfigError(f"input has {input_size} neurons, layer 0 expects {self.layers[0].in_size}")
        if self.readout not in ("spike_count", "membrane"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.num_steps < 1 or not self.dt > 0 or not self.tau1 > 0:
            raise ConfigError("num_steps, dt and tau1 must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        return self

    def to_dict(self) -> dict:
        return {
            "layers": [{"in_size": l.in_size, "out_size": l.out_size, "neuron_model": l.neuron_model,
                        "policy": l.policy.to_dict()} for l in self.layers],
            "dt": self.dt, "num_steps": self.num_steps, "readout": self.readout, "seed": self.seed,
            "lif": asdict(self.lif), "srm": asdict(self.srm), "tau1": self.tau1,
            "init_scale": self.init_scale, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        layers = [LayerSpec(l["in_size"], l["out_size"], l["neuron_model"], PolicySpec.from_dict(l["policy"]))
                  for l in d["layers"]]
        return cls(layers=layers, dt=d["dt"], num_steps=d["num_steps"], readout=d["readout"], seed=d["seed"],
                   lif=LifParams(**d["lif"]), srm=SrmParams(**d["srm"]), tau1=d["tau1"],
                   init_scale=d["init_scale"], dtype=d["dtype"])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 50
    surrogate_width: float = 1.0
    loss: str = "ce_rates"
    rate_scale: float = 20.0
    optimizer: str = "adam"

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not self.surrogate_width > 0:
            raise ConfigError("surrogate_width must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.loss != "ce_rates":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        return self


@dataclass
class Telemetry:
    """Spike bookkeeping for one batch.

    Stage ``l`` is the synaptic projection into layer ``l``; its presynaptic
    population is the input raster for ``l == 0`` and layer ``l-1`` otherwise.
    """

    num_steps: int
    fan_out: list
    presyn_step_counts: list      # per stage: (batch, steps) presynaptic spikes
    layer_spike_counts: list      # per layer: (batch, neurons) spike totals
    layer_step_spikes: list       # per layer: (batch, steps)
    c_in_totals: list             # per layer: (batch, neurons)
    c_out_totals: list            # per layer: (batch, neurons)
    theta_traces: Optional[list] = None   # per layer: (batch, steps, neurons)
    spike_rasters: Optional[list] = None  # input then each layer: (batch, steps, neurons)

    @property
    def batch_size(self) -> int:
        return int(self.presyn_step_counts[0].shape[0])

    def neuron_spike_counts(self) -> torch.Tensor:
        """(batch, all non-input neurons) spike totals."""
        return torch.cat(self.layer_spike_counts, dim=1)


class SpikingMLP(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config.validate()
        self.dtype = _DTYPES[config.dtype]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.zeros(l.in_size, l.out_size, dtype=self.dtype)) for l in config.layers
        )
        self.policies = [l.policy.build(config.dt) for l in config.layers]

    @property
    def num_classes(self) -> int:
        return self.config.layers[-1].out_size

    def forward(self, x: torch.Tensor, spike_fn: Callable = heaviside, record_theta: bool = False,
                record_spikes: bool = False):
        """Simulate a batch of rasters ``x`` of shape (batch, steps, inputs).

        Returns ``(scores, telemetry)``.
        """
        cfg = self.config
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[2] != cfg.layers[0].in_size:
            raise ConfigError(f"raster has {x.shape[2]} neurons, layer 0 expects {cfg.layers[0].in_size}")
        x = x.to(self.dtype)
        batch, steps = x.shape[0], x.shape[1]
        decay = math.exp(-cfg.dt / cfg.tau1)

        states, thresholds, syn = [], [], []
        for layer, policy in zip(cfg.layers, self.policies):
            shape = (batch, layer.out_size)
            states.append(NeuronState.resting(shape, cfg.lif.e_l if layer.neuron_model == "lif" else 0.0,
                                              self.dtype, srm=layer.neuron_model == "srm"))
            thresholds.append(policy.init_state(shape, self.dtype))
            syn.append(torch.zeros(shape, dtype=self.dtype))

        n_layers = len(cfg.layers)
        presyn = [[] for _ in range(n_layers)]
        step_spikes = [[] for _ in range(n_layers)]
        spike_tot = [torch.zeros(batch, l.out_size, dtype=self.dtype) for l in cfg.layers]
        c_in_tot = [torch.zeros(batch, l.out_size, dtype=self.dtype) for l in cfg.layers]
        thetas = [[] for _ in range(n_layers)] if record_theta else None
        rasters = [[] for _ in range(n_layers)] if record_spikes else None
        readout = torch.zeros(batch, self.num_classes, dtype=self.dtype)

        for t in range(steps):
            s = x[:, t]
            for l, layer in enumerate(cfg.layers):
                syn[l] = syn[l] * decay + s @ self.weights[l]
                v_prev = states[l].last_v
                theta = thresholds[l].theta
                if record_theta:
                    thetas[l].append(theta)
                if layer.neuron_model == "lif":
                    states[l], spk = lif_step(states[l], cfg.lif, syn[l], theta, cfg.dt, spike_fn)
                else:
                    states[l], spk = srm_step(states[l], cfg.srm, syn[l], theta, cfg.dt, spike_fn)
                with torch.no_grad():
                    n_pre = s.detach().sum(dim=1, keepdim=True)
                    c_out = spk.detach()
                    thresholds[l] = self.policies[l].step(
                        thresholds[l], states[l].last_v.detach(), v_prev.detach(), n_pre, c_out)
                    presyn[l].append(n_pre.squeeze(1))
                    step_spikes[l].append(c_out.sum(dim=1))
                    spike_tot[l] += c_out
                    c_in_tot[l] += n_pre
                    if record_spikes:
                        rasters[l].append(c_out)
                s = spk
            if cfg.readout == "spike_count":
                readout = readout + s
            else:
                readout = readout + states[-1].v

        telemetry = Telemetry(
            num_steps=steps,
            fan_out=[l.out_size for l in cfg.layers],
            presyn_step_counts=[torch.stack(p, dim=1) for p in presyn],
            layer_spike_counts=spike_tot,
            layer_step_spikes=[torch.stack(p, dim=1) for p in step_spikes],
            c_in_totals=c_in_tot,
            c_out_totals=[c.clone() for c in spike_tot],
            theta_traces=[torch.stack(th, dim=1) for th in thetas] if record_theta else None,
            spike_rasters=([x.detach()] + [torch.stack(r, dim=1) for r in rasters]) if record_spikes else None,
        )
        return readout, telemetry


def init_network(config: NetworkConfig, seed: Optional[int] = None) -> SpikingMLP:
    """Uniform zero-mean weights with half-width ``init_scale / sqrt(in_size)``."""
    net = SpikingMLP(config)
    gen = torch.Generator().manual_seed(config.seed if seed is None else seed)
    with torch.no_grad():
        for w, layer in zip(net.weights, config.layers):
            if layer.weights is not None:
                given = torch.as_tensor(layer.weights, dtype=net.dtype)
                if given.shape != w.shape or not torch.isfinite(given).all():
                    raise ConfigError(f"supplied weights must be finite with shape {tuple(w.shape)}")
                w.copy_(given)
            else:
                bound = config.init_scale / math.sqrt(layer.in_size)
                w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return net


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    raster: SpikeRaster
    label: int


def rasterize(streams: Sequence[EventStream], dt_ms: float) -> list[Sample]:
    out = []
    for s in streams:
        if s.label is None:
            raise ConfigError("supervised samples need a label")
        out.append(Sample(events_to_spikes(s, dt_ms * 1000.0), int(s.label)))
    return out


def stack_batch(samples: Sequence[Sample], num_steps: int, dtype=torch.float32):
    x = torch.stack([s.raster.to_tensor(num_steps, dtype) for s in samples])
    y = torch.tensor([s.label for s in samples], dtype=torch.long)
    return x, y


def rate_logits(scores: torch.Tensor, num_steps: int, scale: float) -> torch.Tensor:
    return scores / num_steps * scale


def predict(scores: torch.Tensor) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(scores.detach().cpu().numpy(), axis=1)


def make_optimizer(net: SpikingMLP, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(net.parameters(), lr=cfg.learning_rate)


def train_epoch(net: SpikingMLP, dataset: Sequence[Sample], cfg: TrainConfig, optimizer=None,
                epoch: int = 0, seed: Optional[int] = None):
    """One pass of BPTT over ``dataset`` in seeded shuffled mini-batches.

    Returns ``(net, mean_loss, train_accuracy)``; ``net`` is updated in place.
    """
    cfg.validate()
    if not dataset:
        raise ConfigError("training set is empty")
    n_classes = net.num_classes
    if any(not 0 <= s.label < n_classes for s in dataset):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    optimizer = optimizer or make_optimizer(net, cfg)
    seed = net.config.seed if seed is None else seed
    gen = torch.Generator().manual_seed(seed * 1000003 + epoch)
    order = torch.randperm(len(dataset), generator=gen).tolist()
    spike_fn = rect_surrogate(cfg.surrogate_width)
    steps = net.config.num_steps

    total_loss, correct = 0.0, 0
    net.train()
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
        x, y = stack_batch(batch, steps, net.dtype)
        scores, _ = net(x, spike_fn=spike_fn)
        loss = F.cross_entropy(rate_logits(scores, steps, cfg.rate_scale), y)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total_loss += loss.item() * len(batch)
        correct += int((predict(scores) == y.numpy()).sum())
    return net, total_loss / len(dataset), correct / len(dataset)


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    neuron_counts: np.ndarray        # (trials, non-input neurons) spike totals
    presyn_totals: list              # per stage: int total presynaptic spikes
    step_spikes: np.ndarray          # (steps, layers) spike totals over all samples
    num_steps: int
    num_inferences: int
    fan_out: list
    theta_trace: Optional[list] = None  # per layer: (steps, neurons) of the first sample


@torch.no_grad()
def evaluate(net: SpikingMLP, dataset: Sequence[Sample], batch_size: int = 100,
             trace_first: bool = False) -> EvalResult:
    if not dataset:
        raise ConfigError("evaluation set is empty")
    net.eval()
    steps = net.config.num_steps
    preds, labels, counts = [], [], []
    presyn = [0] * len(net.config.layers)
    step_spikes = np.zeros((steps, len(net.config.layers)), dtype=np.int64)
    theta_trace = None
    for start in range(0, len(dataset), batch_size):
        x, y = stack_batch(dataset[start:start + batch_size], steps, net.dtype)
        record = trace_first and start == 0
        scores, tel = net(x, record_theta=record)
        if record:
            theta_trace = [th[0].clone() for th in tel.theta_traces]
        preds.append(predict(scores))
        labels.append(y.numpy())
        counts.append(tel.neuron_spike_counts().numpy().astype(np.int64))
        for l, p in enumerate(tel.presyn_step_counts):
            presyn[l] += int(p.sum().item())
        step_spikes += np.stack([s.sum(dim=0).numpy() for s in tel.layer_step_spikes], axis=1).astype(np.int64)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    return EvalResult(
        accuracy=float((preds == labels).mean()),
        predictions=preds, labels=labels, neuron_counts=np.concatenate(counts),
        presyn_totals=presyn, step_spikes=step_spikes, num_steps=steps,
        num_inferences=len(dataset), fan_out=[l.out_size for l in net.config.layers],
        theta_trace=theta_trace,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"ABNSNN\x00"
_VERSION = 1


def save_checkpoint(net: SpikingMLP, path) -> None:
    """Binary checkpoint: magic, version, JSON config echo, raw little-endian weights."""
    header = json.dumps({"config": net.config.to_dict(),
                         "weights": [list(w.shape) for w in net.weights]}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HI", _VERSION, len(header)))
    buf.write(header)
    for w in net.weights:
        buf.write(w.detach().cpu().numpy().astype(w.detach().numpy().dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> SpikingMLP:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise DecodeError(f"{path} is not a checkpoint")
    pos = len(_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, pos)
    if version != _VERSION:
        raise DecodeError(f"unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    config = NetworkConfig.from_dict(header["config"])
    net = SpikingMLP(config)
    np_dtype = np.dtype(config.dtype).newbyteorder("<")
    with torch.no_grad():
        for w, shape in zip(net.weights, header["weights"]):
            n = int(np.prod(shape)) * np_dtype.itemsize
            arr = np.frombuffer(data[pos:pos + n], dtype=np_dtype).reshape(shape)
            w.copy_(torch.from_numpy(arr.astype(np_dtype.newbyteorder("="))))
            pos += n
    if pos != len(data):
        raise DecodeError(f"{path}: {len(data) - pos} trailing bytes")
    return net
