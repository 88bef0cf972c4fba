"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they happen; a summary section is printed at the end of every session.
"""

import itertools
import statistics
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from flexmod.cli import main, median_rounds
from flexmod.config import ExperimentConfig, Strategy
from flexmod.ddpg import DdpgAgent, DdpgConfig, Transition, compute_reward, policy, q_value
from flexmod.fedsim import build_dataset, local_train, run_experiment, run_round, setup
from flexmod.importance import normalize_importance, shapley_from_values, subset_values
from flexmod.model import GlobalModel, aggregate
from flexmod.nn import SgdConfig, cross_entropy, init_mlp, mean, mse, neg
from flexmod.prototype import Prototype, global_prototypes, normalize_prototype, normalize_quality
from flexmod.scheduler import (BoundParams, CombinationTable, bound_from_sizes, ordering_guaranteed,
                               solve_knapsack, utility)

from oracles import central_diff, exhaustive_knapsack, max_rel_err, permutation_shapley


def _report(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ kernels

def test_criterion_01_shapley_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_oracle = worst_eff = 0.0
    games = 0
    for m in (2, 3, 4):
        for _ in range(30):
            vals = rng.normal(size=1 << m) * rng.choice([1e-3, 1.0, 1e3])
            table = {frozenset(i for i in range(m) if mask >> i & 1): float(vals[mask])
                     for mask in range(1 << m)}
            phi = shapley_from_values(subset_values(table.__getitem__, m), m)
            worst_oracle = max(worst_oracle, float(np.max(np.abs(
                phi - permutation_shapley(table.__getitem__, m)))))
            worst_eff = max(worst_eff, abs(phi.sum() - (table[frozenset(range(m))] - table[frozenset()])))
            games += 1
    elapsed = time.perf_counter() - t0
    ok = worst_oracle < 1e-9 and worst_eff < 1e-9 and elapsed < 1.0
    _report(1, "Shapley exactness", ok, f"{games} games M=2..4, max |subset-perm|={worst_oracle:.1e}, "
                                        f"max efficiency residual={worst_eff:.1e}, {elapsed:.2f}s")


def test_criterion_02_knapsack_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = infeasible = 0
    n = 1000
    for _ in range(n):
        s = int(rng.integers(1, 8))
        budget = int(rng.integers(0, 31))
        times = rng.integers(1, 9, size=s)
        values = rng.normal(size=s)
        counts = solve_knapsack(values, times, budget)
        _, vec = exhaustive_knapsack(values, times, budget)
        if float(np.dot(values, counts)) != float(np.dot(values, vec)):
            mismatches += 1
        if int(np.dot(times, counts)) > budget:
            infeasible += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and infeasible == 0 and elapsed < 30
    _report(2, "knapsack optimality", ok, f"{n} instances S<=7 T<=30, {mismatches} suboptimal, "
                                          f"{infeasible} infeasible, {elapsed:.1f}s")


def test_criterion_03_descending_order_minimises_bound():
    # step sizes and smoothness drawn from a training regime (eta <= 1e-2, L <= 10);
    # see the scheduler tests for the large-step counterexample
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n = 250
    failures = unguaranteed = 0
    for _ in range(n):
        m = int(rng.integers(2, 5))
        e = int(rng.integers(1, 8))
        sizes = [int(c) for c in rng.integers(1, m + 1, size=e)]
        params = BoundParams(float(np.exp(rng.uniform(np.log(1e-4), np.log(1e-2)))),
                             float(np.exp(rng.uniform(np.log(0.1), np.log(10.0)))),
                             float(rng.uniform(0.1, 10.0)), m)
        unguaranteed += not ordering_guaranteed(params, e)
        best = min(bound_from_sizes(p, params) for p in set(itertools.permutations(sizes)))
        if bound_from_sizes(sorted(sizes, reverse=True), params) > best:
            failures += 1
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 60
    _report(3, "descending-|C| order attains the minimum bound", ok,
            f"{n} schedules E<=7, {failures} violations, {unguaranteed} outside the proven regime, "
            f"{elapsed:.1f}s")


def test_criterion_04_separate_equals_combined():
    rng = np.random.default_rng(4)
    worst = 0.0
    exact_failures = 0
    for _ in range(200):
        # dyadic indices make every product and sum exact in binary floating point
        q = rng.integers(0, 1024, size=2) / 1024
        g = rng.integers(0, 1024, size=2) / 1024
        table = CombinationTable.from_indices([4, 3, 5], q, g)
        for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
            if utility([1, 1, 0], table, beta) != utility([0, 0, 1], table, beta):
                exact_failures += 1
        qf, gf = rng.random(2), rng.random(2)
        tf = CombinationTable.from_indices([4, 3, 5], qf, gf)
        for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
            worst = max(worst, abs(utility([1, 1, 0], tf, beta) - utility([0, 0, 1], tf, beta)))
    ok = exact_failures == 0 and worst < 1e-15
    _report(4, "separate singletons equal one combined slot", ok,
            f"200 dyadic vectors x 5 betas exact, {exact_failures} mismatches; "
            f"general floats max diff={worst:.1e}")


def _grad_check(loss_fn, params):
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    arrays = [p.data for p in params]
    numeric = central_diff(lambda: float(loss_fn().data), arrays)
    return max(max_rel_err(a, n) for a, n in zip(analytic, numeric))


def test_criterion_05_gradients_on_default_shapes():
    cfg = ExperimentConfig()
    rng = np.random.default_rng(5)
    md, ds = cfg.model, cfg.dataset
    model = GlobalModel.create(ds.dims, md.feature_dim, ds.num_classes, md.encoder_hidden,
                               md.header_hidden, rng, md.encoder_activation)
    x = [rng.normal(size=(6, d)) for d in ds.dims]
    y = rng.integers(0, ds.num_classes, size=6)
    errs = {"encoders+header": _grad_check(lambda: cross_entropy(model.logits(x), y),
                                           model.parameters())}
    dc = cfg.ddpg_config()
    state_dim = 2 * len(ds.dims)
    actor = init_mlp([state_dim, *dc.hidden, 1], "relu", rng)
    critic = init_mlp([state_dim + 1, *dc.hidden, 1], "relu", rng)
    s = rng.random(size=(5, state_dim))
    a = rng.random(size=(5, 1))
    target = rng.normal(size=5)

    def critic_loss():
        return mse(q_value(critic, s, a), target)

    def actor_loss():
        return neg(mean(q_value(critic, s, policy(actor, s))))

    errs["critic"] = _grad_check(critic_loss, critic.parameters())
    errs["actor"] = _grad_check(actor_loss, actor.parameters())
    for p in critic.parameters():
        p.grad = None
    worst = max(errs.values())
    _report(5, "autodiff matches central differences", worst < 1e-4,
            ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def test_criterion_06_aggregation_identities():
    rng = np.random.default_rng(6)
    models = [GlobalModel.create([14, 80], 16, 6, [[32], [32]], [32], rng) for _ in range(10)]
    out = aggregate(models)
    agg_err = 0.0
    for j, p in enumerate(out.parameters()):
        stack = np.stack([m.parameters()[j].data for m in models])
        # rounding error is measured against the operands, not the (possibly tiny) mean
        scale = np.max(np.abs(stack), axis=0)
        agg_err = max(agg_err, float(np.max(np.abs(p.data - stack.mean(axis=0)) / scale)))
    clients = [[Prototype(m, k, rng.normal(size=16)) for m in range(2) for k in range(6)]
               for _ in range(10)]
    protos = global_prototypes(clients, 2, 6)
    proto_err = 0.0
    for p in protos:
        naive = np.mean([c[p.modality * 6 + p.klass].vector for c in clients], axis=0)
        proto_err = max(proto_err, float(np.max(np.abs(p.vector - naive))))
    norm_err = max(abs(np.linalg.norm(normalize_prototype(p).vector) - 1) for p in protos)
    norm_err = max(norm_err, abs(np.linalg.norm(normalize_quality(rng.random(3))) - 1),
                   abs(np.linalg.norm(normalize_importance(-rng.random(3))) - 1))
    eps = np.finfo(float).eps
    ok = agg_err <= 8 * eps and proto_err <= 8 * eps and norm_err < 1e-9
    _report(6, "FedAvg and prototype aggregation identities", ok,
            f"FedAvg err {agg_err:.1e} of operand scale, prototype err {proto_err:.1e}, unit-norm err {norm_err:.1e}")


def test_criterion_07_frozen_encoders():
    cfg = ExperimentConfig().with_overrides(run={"rounds": 1})
    sim = setup(cfg)
    table = CombinationTable(2, sim.times)
    checked = 0
    identical = True
    for frozen, schedule in ((1, [0, 0, 0, 0, 0, 0]), (0, [1] * 8)):
        before = [p.data.copy() for p in sim.model.encoders[frozen].parameters()]
        for n, shard in enumerate(sim.shards):
            local, _ = local_train(sim.model, shard, schedule, table.members, 64,
                                   SgdConfig(0.05), np.random.default_rng(n))
            identical &= all(np.array_equal(p.data, q) for p, q in
                             zip(local.encoders[frozen].parameters(), before))
            checked += 1
    rec_before = [p.data.copy() for p in sim.model.encoders[0].parameters()]
    run_round(sim, Strategy("single_modality", modality=1))
    after_agg = all(np.array_equal(p.data, q) for p, q in zip(sim.model.encoders[0].parameters(),
                                                               rec_before))
    _report(7, "untrained encoders stay bit-identical", identical and after_agg,
            f"{checked} client updates checked before aggregation, after aggregation too: {after_agg}")


def test_criterion_08_degenerate_equivalence():
    cfg = ExperimentConfig().with_overrides(run={"rounds": 6})
    data = build_dataset(cfg)
    pinned = run_experiment(cfg, Strategy("flexmod", pin=2), data=data)
    entire = run_experiment(cfg, Strategy("entire_update"), data=data)
    same = [a.same_trajectory(b) for a, b in zip(pinned.records, entire.records)]
    ok = len(same) == 6 and all(same)
    _report(8, "flexmod pinned to the full combination equals entire_update", ok,
            f"{sum(same)}/{len(same)} round records bit-identical (beta excluded)")


def test_criterion_09_reward_shape():
    cfg = DdpgConfig(phi=64, target_acc=0.68)
    at_target = compute_reward(0.68, cfg)
    at_zero = compute_reward(0.0, cfg)
    grid = np.linspace(0, 1, 1001)
    r = np.array([compute_reward(a, cfg) for a in grid])
    below = r[grid < 0.68]
    ok = (at_target == 0.0 and abs(at_zero - (64 ** -0.68 - 1)) < 1e-6 and abs(at_zero + 0.941) < 1e-3
          and np.all(np.diff(below) > 0) and np.all(np.diff(r) >= 0)
          and r.min() >= -1 and r.max() <= 0)
    _report(9, "reward shape", ok, f"R(target)={at_target}, R(0)={at_zero:.6f}, "
                                   f"monotone and within [-1, 0] on a 1001-point grid")


def test_criterion_10_ddpg_bandit():
    t0 = time.perf_counter()
    finals = []
    for seed in range(5):
        cfg = DdpgConfig(actor_lr=1e-3, critic_lr=1e-3, tau=0.01, discount=0.0, noise_std=0.3,
                         noise_decay=1.0)
        rng = np.random.default_rng([seed, 0])
        agent = DdpgAgent(2, cfg, np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]))
        state = np.ones(2)
        updates = 0
        while updates < 5000:
            beta = agent.act(state)
            agent.observe(Transition(state, beta, -(beta - 0.7) ** 2, state))
            if len(agent.buffer) >= cfg.batch_size:
                agent.update(agent.buffer.sample(cfg.batch_size, rng))
                updates += 1
        finals.append(agent.act(state, explore=False))
    elapsed = time.perf_counter() - t0
    hits = sum(abs(b - 0.7) < 0.1 for b in finals)
    ok = hits >= 4 and elapsed < 120
    _report(10, "DDPG solves the stateless bandit", ok,
            f"{hits}/5 seeds within 0.1 of 0.7 after 5000 updates "
            f"({', '.join(f'{b:.3f}' for b in finals)}), {elapsed:.0f}s")


# ---------------------------------------------------------------- end to end

def test_criterion_11_end_to_end_trend():
    t0 = time.perf_counter()
    base = ExperimentConfig()
    target = base.run.target_acc
    names = base.dataset.modalities
    rtt = {"flexmod": [], "entire_update": []}
    final = {"flexmod": [], "best_single": []}
    low_budget_ok = []
    for seed in range(5):
        cfg = base.with_overrides(run={"seed": seed})
        data = build_dataset(cfg)
        res = {s: run_experiment(cfg, Strategy.parse(s, names), data=data)
               for s in ("flexmod", "entire_update", "single_modality:acc", "single_modality:gyro")}
        rtt["flexmod"].append(res["flexmod"].rounds_to_target(target))
        rtt["entire_update"].append(res["entire_update"].rounds_to_target(target))
        final["flexmod"].append(res["flexmod"].final_acc)
        final["best_single"].append(max(res["single_modality:acc"].final_acc,
                                        res["single_modality:gyro"].final_acc))

        small = cfg.with_overrides(schedule={"budget": 4})
        small_data = data
        flex = run_experiment(small, Strategy("flexmod"), data=small_data)
        entire = run_experiment(small, Strategy("entire_update"), data=small_data)
        frozen = all(r.acc == entire.initial_acc and r.budget_used == 0 for r in entire.records)
        low_budget_ok.append(frozen and flex.final_acc - flex.initial_acc >= 0.10)
    elapsed = time.perf_counter() - t0

    med_flex, med_entire = median_rounds(rtt["flexmod"]), median_rounds(rtt["entire_update"])
    faster = med_flex is not None and (med_entire is None or med_flex <= med_entire)
    gap = statistics.median(final["flexmod"]) - statistics.median(final["best_single"])
    ok = faster and gap >= 0.02 and all(low_budget_ok) and elapsed < 900
    _report(11, "end-to-end trend", ok,
            f"median rounds-to-target flexmod={med_flex} entire_update={med_entire}; "
            f"median final acc flexmod={statistics.median(final['flexmod']):.3f} "
            f"best single={statistics.median(final['best_single']):.3f} (gap {gap:+.3f}); "
            f"T=4 entire frozen and flexmod +10pts on {sum(low_budget_ok)}/5 seeds; {elapsed:.0f}s")


def test_criterion_12_determinism(tmp_path):
    cfg = ExperimentConfig().with_overrides(run={"rounds": 4})
    path = tmp_path / "config.json"
    cfg.save(path)
    codes = [main(["simulate", "--config", str(path), "--no-plots", "--out", str(tmp_path / d)])
             for d in ("a", "b")]
    a = (tmp_path / "a" / "rounds.csv").read_bytes()
    b = (tmp_path / "b" / "rounds.csv").read_bytes()
    ok = codes == [0, 0] and a == b
    _report(12, "simulate is byte-for-byte reproducible", ok,
            f"exit codes {codes}, rounds.csv {len(a)} bytes, identical={a == b}")
