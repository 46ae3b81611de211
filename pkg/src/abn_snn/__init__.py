"""Event-driven spiking networks with ABN dynamic thresholds."""

from .adaptive_threshold import (AbnParams, AbnState, abn_update, make_policy, membrane_gradient,
                                 spike_efficiency, threshold_rate, trg)
from .errors import AbnError, ConfigError, DecodeError, DivergenceError, NumericError, OutOfRangeError
from .event_io import (Event, EventStream, SpikeRaster, decode_nmnist, encode_nmnist, events_to_spikes,
                       synth_burst, synth_poisson)
from .metrics import EnergyReport, FiringStats, compare_runs, energy_report, firing_stats
from .network import (LayerSpec, NetworkConfig, PolicySpec, SpikingMLP, TrainConfig, evaluate, init_network,
                      train_epoch)
from .neuron_core import LifParams, NeuronState, SrmParams, lif_step, srm_step

__version__ = "0.1.0"
