"""Multi-client training simulation: skewed partitions and FedAvg rounds.

The simulation is sequential and deterministic: client sampling, per-client
data order and aggregation order are all fixed by the run seed, and
aggregation reduces in ascending client id. Server state carries parameters
only; optimizer moments start fresh on every client, every round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TaskCorpus
from .errors import ConfigError, InputError
from .model import Backbone
from .training import RunMetrics, TrainableState, evaluate, train_centralized
from .gating import GatingParams


@dataclass
class ClientPartition:
    client_id: int
    task_indices: dict  # task id -> list of corpus sample indices (train split)

    @property
    def sample_count(self) -> int:
        return sum(len(v) for v in self.task_indices.values())

    def materialize(self, corpus: TaskCorpus) -> TaskCorpus:
        """The client's private shard; the only data its training may read."""
        samples = []
        for task in sorted(self.task_indices):
            for idx in self.task_indices[task]:
                samples.append(corpus.samples[idx])
        return TaskCorpus(samples=samples)

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "task_indices": {str(t): list(map(int, v)) for t, v in self.task_indices.items()},
        }


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 100
    active_per_round: int = 10
    local_steps: int = 250
    total_steps: int = 50000
    skew_factor: float = 15.0
    aggregation: str = ""  # "", "prompts_only" or "prompts_and_gate"

    def __post_init__(self):
        if self.n_clients < 1 or self.active_per_round < 1 or self.local_steps < 1:
            raise ConfigError("client counts and local_steps must be >= 1")
        if self.active_per_round > self.n_clients:
            raise ConfigError(
                f"active_per_round {self.active_per_round} exceeds n_clients {self.n_clients}"
            )
        per_round = self.active_per_round * self.local_steps
        if self.total_steps % per_round != 0:
            raise ConfigError(
                f"total_steps {self.total_steps} not divisible by "
                f"active_per_round*local_steps = {per_round}"
            )
        if self.aggregation not in ("", "prompts_only", "prompts_and_gate"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")

    @property
    def rounds(self) -> int:
        return self.total_steps // (self.active_per_round * self.local_steps)


def partition_skewed(
    corpus: TaskCorpus, n_clients: int, skew_factor: float, seed: int
) -> list:
    """Split each task's training samples into one oversized shard plus
    near-equal remainders, then deal one shard per task to every client.
    """
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if skew_factor < 1:
        raise ConfigError(f"skew_factor must be >= 1, got {skew_factor}")
    by_task: dict = {}
    for idx, sample in enumerate(corpus.samples):
        if sample.split == "train":
            by_task.setdefault(sample.task, []).append(idx)
    partitions = [ClientPartition(client_id=c, task_indices={}) for c in range(n_clients)]
    for task in sorted(by_task):
        indices = by_task[task]
        total = len(indices)
        if total < n_clients:
            raise InputError(
                f"task {task} has {total} training samples, fewer than {n_clients} clients"
            )
        if n_clients == 1:
            shards = [list(indices)]
        else:
            rng = np.random.default_rng([seed, task, 0xFED])
            shuffled = [indices[i] for i in rng.permutation(total)]
            base = int(total // (n_clients - 1 + skew_factor))
            base = max(base, 1)
            big = int(math.floor(skew_factor * base))
            rest = total - (n_clients - 1) * base - big
            if rest < 0:
                big += rest
                rest = 0
            sizes = [big] + [base] * (n_clients - 1)
            for i in range(rest):
                sizes[1 + i % (n_clients - 1)] += 1
            shards = []
            offset = 0
            for size in sizes:
                shards.append(shuffled[offset : offset + size])
                offset += size
            order = rng.permutation(n_clients)
            shards = [shards[order[c]] for c in range(n_clients)]
        for c in range(n_clients):
            partitions[c].task_indices[task] = shards[c]
    return partitions


def fedavg(
    states: list,
    weights: list | None = None,
    aggregate_gating: bool = True,
    server_state: TrainableState | None = None,
) -> TrainableState:
    """Weighted elementwise mean of client states; moments are dropped.

    With ``aggregate_gating`` off, the gate weights are carried over untouched
    from the server's canonical state (the FedPrompt baseline aggregates
    prompts only).
    """
    if not states:
        raise ConfigError("fedavg needs at least one state")
    ref = states[0]
    for st in states[1:]:
        if st.prompts.shape != ref.prompts.shape or st.gating.w1.shape != ref.gating.w1.shape \
                or st.gating.w2.shape != ref.gating.w2.shape:
            raise ConfigError("client states are structurally different")
    if weights is None:
        weights = [1.0 / len(states)] * len(states)
    if len(weights) != len(states):
        raise ConfigError("one aggregation weight per state required")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights must sum to 1, got {sum(weights)}")
    prompts = np.zeros_like(ref.prompts)
    for w, st in zip(weights, states):
        prompts += w * st.prompts
    if aggregate_gating:
        w1 = np.zeros_like(ref.gating.w1)
        w2 = np.zeros_like(ref.gating.w2)
        for w, st in zip(weights, states):
            w1 += w * st.gating.w1
            w2 += w * st.gating.w2
        gating = GatingParams(w1=w1, w2=w2)
    else:
        if server_state is None:
            raise ConfigError("prompts-only aggregation needs the server state for the gate")
        gating = server_state.gating.copy()
    return TrainableState(prompts=prompts, gating=gating, opt=None, step=ref.step)


def derive_local_seed(seed: int, rnd: int, client_id: int) -> int:
    """Deterministic per-(round, client) seed for local data order."""
    return int(np.random.SeedSequence([seed, rnd, client_id]).generate_state(1)[0])


FED_MODES = ("fedprompt_baseline", "mops")


def train_federated(
    backbone: Backbone,
    first_layer_prompts: np.ndarray,
    init_state: TrainableState,
    partitions: list,
    fed_config: FederationConfig,
    mode: str,
    seed: int,
    corpus: TaskCorpus,
    lr: float = 1e-3,
) -> tuple[TrainableState, RunMetrics]:
    """FedAvg rounds over the partitioned corpus, eval on the global test split."""
    if mode not in FED_MODES:
        raise ConfigError(f"mode must be one of {FED_MODES}, got {mode!r}")
    if len(partitions) != fed_config.n_clients:
        raise ConfigError(
            f"got {len(partitions)} partitions for {fed_config.n_clients} clients"
        )
    local_mode = "baseline" if mode == "fedprompt_baseline" else "mop"
    aggregation = fed_config.aggregation or (
        "prompts_only" if mode == "fedprompt_baseline" else "prompts_and_gate"
    )
    aggregate_gating = aggregation == "prompts_and_gate"
    server = init_state.copy()
    server.opt = None
    metrics = RunMetrics()
    eval_samples = corpus.test_samples()
    shards = {p.client_id: p.materialize(corpus) for p in partitions}
    rng = np.random.default_rng([seed, 0xAC71])
    for rnd in range(fed_config.rounds):
        active = sorted(
            int(c) for c in rng.choice(fed_config.n_clients, size=fed_config.active_per_round, replace=False)
        )
        updated = []
        for cid in active:
            st, _ = train_centralized(
                backbone,
                first_layer_prompts,
                server,
                shards[cid],
                fed_config.local_steps,
                lr,
                derive_local_seed(seed, rnd, cid),
                mode=local_mode,
            )
            updated.append(st)
        server = fedavg(updated, aggregate_gating=aggregate_gating, server_state=server)
        if eval_samples:
            report, _ = evaluate(backbone, first_layer_prompts, server, eval_samples, local_mode)
            metrics.add_round(rnd, active, report)
    return server, metrics
