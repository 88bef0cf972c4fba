"""Round-driven simulation of multimodal federated training.

Each round the server scores every modality encoder (prototype quality and
Shapley importance), picks a blend weight, solves the slot allocation, and
broadcasts an ordered schedule. Every client then trains from the same
global model, updating the header plus only the encoders in the current
slot's combination, and the server averages the results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, Strategy, stream
from .data import MultimodalDataset, load_csv, partition_dirichlet, split_validation, synthesize
from .ddpg import DdpgAgent, Transition, compute_reward
from .importance import normalize_importance, shapley_values
from .model import GlobalModel, aggregate, evaluate
from .nn import SgdConfig, cross_entropy, sgd_step
from .prototype import encoder_quality, global_prototypes, local_prototypes, normalize_prototype
from .scheduler import CombinationTable, fill_with, order_schedule, solve_allocation, time_cost

log = logging.getLogger(__name__)

NO_BETA = -1.0   # recorded for strategies that never consult a blend weight


@dataclass
class RoundRecord:
    round: int
    beta: float
    allocation: np.ndarray
    schedule: list[int]
    omega: np.ndarray
    gamma: np.ndarray
    acc: float
    loss: float
    reward: float
    budget_used: int
    budget: int
    learning_rate: float
    grad_norm_max: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def same_trajectory(self, other: "RoundRecord") -> bool:
        """Bit-exact equality of everything except the blend weight."""
        return (self.round == other.round
                and np.array_equal(self.allocation, other.allocation)
                and self.schedule == other.schedule
                and np.array_equal(self.omega, other.omega)
                and np.array_equal(self.gamma, other.gamma)
                and self.acc == other.acc and self.loss == other.loss
                and self.reward == other.reward
                and self.budget_used == other.budget_used
                and self.learning_rate == other.learning_rate)


@dataclass
class Observation:
    """Server-side view of the global model at the start of a round."""
    omega: np.ndarray
    gamma: np.ndarray
    raw_omega: np.ndarray
    raw_gamma: np.ndarray

    @property
    def agent_state(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.omega])


# ---------------------------------------------------------------- components

def forward_full(model: GlobalModel, inputs: Sequence[np.ndarray], active=None):
    """Logits from every encoder's features; ``active`` only limits which
    encoders record gradients."""
    return model.logits(inputs, trainable=active)


def _batches(n: int, batch_size: int, rng: np.random.Generator, single: bool):
    perm = rng.permutation(n)
    if single:
        return [perm[:batch_size]]
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def local_train(model: GlobalModel, shard: MultimodalDataset, schedule: Sequence[int],
                members: Sequence[Sequence[int]], batch_size: int, sgd: SgdConfig,
                rng: np.random.Generator, slot: str = "sweep") -> tuple[GlobalModel, np.ndarray]:
    """Train a copy of ``model`` slot by slot.

    In each slot the header and the encoders of that slot's combination take
    SGD steps; the remaining encoders only run forward. Returns the trained
    copy and the largest per-encoder gradient norm observed.
    """
    local = model.copy()
    grad_max = np.zeros(model.num_modalities)
    for s in schedule:
        active = list(members[s])
        params = local.header.parameters() + [p for m in active for p in local.encoders[m].parameters()]
        for idx in _batches(len(shard), batch_size, rng, slot == "minibatch"):
            inputs = [x[idx] for x in shard.features]
            loss = cross_entropy(forward_full(local, inputs, active), shard.labels[idx])
            loss.backward()
            for m in active:
                g2 = sum(float(np.sum(p.grad * p.grad)) for p in local.encoders[m].parameters())
                grad_max[m] = max(grad_max[m], math.sqrt(g2))
            sgd_step(params, sgd)
    return local, grad_max


def observe(model: GlobalModel, shards: Sequence[MultimodalDataset],
            validation: MultimodalDataset) -> Observation:
    """Prototype quality and Shapley importance of the current global model.

    A vector that cannot be normalised (every raw index clamps to zero, as
    with an untrained model whose modalities all hurt validation loss) falls
    back to the uniform direction.
    """
    m = model.num_modalities
    uniform = np.full(m, 1.0 / math.sqrt(m))
    local = [[normalize_prototype(p) for p in local_prototypes(model.encoders, shard)]
             for shard in shards]
    protos = global_prototypes(local, m, model.num_classes)
    try:
        raw_q, omega = encoder_quality(protos, m)
    except ValueError:
        raw_q, omega = np.zeros(m), uniform
    raw_g = shapley_values(model, validation)
    try:
        gamma = normalize_importance(raw_g)
    except ValueError:
        gamma = uniform
    return Observation(omega, gamma, raw_q, raw_g)


# -------------------------------------------------------------------- state

@dataclass
class Simulation:
    config: ExperimentConfig
    model: GlobalModel
    shards: list[MultimodalDataset]
    validation: MultimodalDataset
    times: np.ndarray
    agent: DdpgAgent
    round: int = 0
    sgd: SgdConfig | None = None
    obs: Observation | None = None
    records: list[RoundRecord] = field(default_factory=list)

    @property
    def members(self):
        return CombinationTable(self.model.num_modalities, self.times).members


def build_dataset(config: ExperimentConfig) -> tuple[list[MultimodalDataset], MultimodalDataset]:
    ds = config.dataset
    seed = config.run.seed
    need = ds.clients * ds.samples_per_client
    if ds.source == "synthetic":
        total = int(math.ceil(need / (1.0 - ds.validation_fraction)))
        while total - int(round(ds.validation_fraction * total)) < need:
            total += 1
        full = synthesize(len(ds.modalities), ds.num_classes, ds.dims, total,
                          ds.informativeness, ds.noise, int(stream(seed, "data").integers(2**31)))
        full.modality_names = list(ds.modalities)
    else:
        full = load_csv(ds.csv_paths, ds.label_column)
        full.modality_names = list(ds.modalities)
    train, val = split_validation(full, ds.validation_fraction,
                                  int(stream(seed, "split").integers(2**31)))
    size = min(ds.samples_per_client, len(train) // ds.clients)
    shards = partition_dirichlet(train, ds.clients, ds.alpha,
                                 int(stream(seed, "partition").integers(2**31)), shard_size=size)
    return [train.subset(s.indices) for s in shards], val


def setup(config: ExperimentConfig, data=None) -> Simulation:
    """Build data, the initial global model and the agent, all from the root seed."""
    seed = config.run.seed
    shards, val = build_dataset(config) if data is None else data
    md = config.model
    model = GlobalModel.create(shards[0].dims, md.feature_dim, val.num_classes,
                               md.encoder_hidden, md.header_hidden, stream(seed, "init"),
                               md.encoder_activation)
    m = model.num_modalities
    agent = DdpgAgent(2 * m, config.ddpg_config(), stream(seed, "agent"), stream(seed, "noise"))
    if config.run.agent_checkpoint_in:
        agent.load(config.run.agent_checkpoint_in)
    sc = config.schedule
    sgd = SgdConfig(sc.learning_rate, sc.lr_decay, sc.lr_floor)
    return Simulation(config, model, shards, val, config.time_table(), agent, sgd=sgd)


def run_round(sim: Simulation, strategy: Strategy) -> RoundRecord:
    cfg = sim.config
    r = sim.round
    m = sim.model.num_modalities
    budget = cfg.schedule.budget

    # (1)-(2) prototypes, quality and importance of the current global model
    obs = sim.obs if sim.obs is not None else observe(sim.model, sim.shards, sim.validation)
    table = CombinationTable.from_indices(sim.times, obs.omega, obs.gamma)

    # (3)-(4) blend weight, allocation and ordered schedule
    if strategy.kind == "flexmod":
        beta = sim.agent.act(obs.agent_state)
    elif strategy.kind == "fixed_beta":
        beta = strategy.beta
    else:
        beta = NO_BETA
    if strategy.kind == "entire_update":
        alloc = fill_with(table, table.full_index, budget)
    elif strategy.kind == "single_modality":
        alloc = fill_with(table, table.singleton_index(strategy.modality), budget)
    elif strategy.pin is not None:
        alloc = fill_with(table, strategy.pin, budget)
    else:
        alloc = solve_allocation(table, beta, budget)
    schedule = order_schedule(alloc, table)

    # (5)-(6) local training from the same global model, then averaging
    lr = sim.sgd.learning_rate
    local_sgd = SgdConfig(lr, 1.0, min(lr, sim.sgd.floor))
    grad_max = np.zeros(m)
    if schedule:
        clients = []
        for n, shard in enumerate(sim.shards):
            trained, g = local_train(sim.model, shard, schedule, table.members,
                                     cfg.schedule.batch_size, local_sgd,
                                     stream(cfg.run.seed, "batching", r, n), cfg.schedule.slot)
            grad_max = np.maximum(grad_max, g)
            clients.append(trained)
        sim.model = aggregate(clients)

    # (7) evaluation; (8) reward and agent update
    acc, loss = evaluate(sim.model, sim.validation)
    reward = compute_reward(acc, sim.agent.config)
    next_obs = observe(sim.model, sim.shards, sim.validation)
    if strategy.kind == "flexmod":
        sim.agent.observe(Transition(obs.agent_state, beta, reward, next_obs.agent_state))
        sim.agent.learn()
        sim.agent.decay_noise()

    record = RoundRecord(r + 1, float(beta), alloc, schedule, obs.omega, obs.gamma, acc, loss,
                         reward, time_cost(alloc, table), budget, lr, grad_max)
    sim.obs = next_obs
    sim.sgd = sim.sgd.decayed()
    sim.round += 1
    sim.records.append(record)
    log.info("round %d beta=%.3f alloc=%s acc=%.4f loss=%.4f", r + 1, beta, alloc.tolist(), acc, loss)
    return record


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    model: GlobalModel
    initial_acc: float
    simulation: Simulation

    def rounds_to_target(self, target: float) -> int | None:
        for rec in self.records:
            if rec.acc >= target:
                return rec.round
        return None

    @property
    def final_acc(self) -> float:
        return self.records[-1].acc if self.records else self.initial_acc

    @property
    def total_idle_time(self) -> int:
        return int(sum(rec.budget - rec.budget_used for rec in self.records))


def run_experiment(config: ExperimentConfig, strategy: Strategy | None = None,
                   data=None) -> ExperimentResult:
    """Run ``config.run.rounds`` rounds (or until the target when early stop is on)."""
    strategy = config.strategy() if strategy is None else strategy
    sim = setup(config, data)
    initial_acc, _ = evaluate(sim.model, sim.validation)
    for _ in range(config.run.rounds):
        rec = run_round(sim, strategy)
        if config.run.early_stop and rec.acc >= config.run.target_acc:
            break
    if config.run.agent_checkpoint_out:
        sim.agent.save(config.run.agent_checkpoint_out)
    return ExperimentResult(sim.records, sim.model, initial_acc, sim)
