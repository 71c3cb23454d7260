"""Discrete-event simulator for LLM inference programs over a paged KV-cache file system."""

from .config import ExperimentConfig, config_from_dict, load_config
from .decoding import SamplerSpec, TokenAutomaton, constrained_next, greedy, mask_dist, sample, speculative_verify
from .errors import *  # noqa: F401,F403
from .kernel import Kernel, KernelConfig, KvfsConfig, ThreadState, Trace, check_transitions
from .kvfs import Caller, KvEntry, KvFile, Kvfs, read_kvf, write_kvf
from .model import DistList, MockModel, ModelConfig, oracle_from_scratch
from .scheduler import BatchScheduler, CostModel, Metrics, RateEstimator, SchedulerConfig, metrics_collect
from .workload import WorkloadSpec, gen_requests, popularity

__version__ = "0.1.0"
