"""Training-regime tests: freeze-mask exactness, continual preservation,
transfer parameter budgets, and the shared stage loop."""

import fnmatch

import numpy as np
import pytest

from moepolicy import tensor as T
from moepolicy.data import build_windows, generate_dataset
from moepolicy.diffusion import DenoiserNetwork, DiffusionSchedule, ModelConfig, count_parameters
from moepolicy.lifecycle import (ContinualStageResult, StagePlan, Task, TaskSet,
                                 evaluate_network, expert_score_trace, freeze_all,
                                 run_stage, trainable_fraction, trainable_names,
                                 train_continual, train_full_finetune, train_multitask,
                                 train_transfer, transfer_patterns, unfreeze,
                                 usage_cosines)
from moepolicy.moe import ConfigurationError


TINY = ModelConfig(n_blocks=2, embed_dim=32, n_heads=2, n_experts=4, top_k=2,
                   expert_expansion=1, t_diff=4, encoder_hidden=32)


@pytest.fixture(scope="module")
def tiny_tasks():
    tasks = []
    for env_id in ("reach", "push"):
        ds = generate_dataset(env_id, n=6, seed=3)
        tasks.append(Task(env_id, env_id, build_windows(ds, TINY.obs_steps, TINY.horizon)))
    return TaskSet(tasks)


@pytest.fixture(scope="module")
def composed_task():
    ds = generate_dataset("push-then-reach", n=4, seed=5)
    return Task("push-then-reach", "push-then-reach",
                build_windows(ds, TINY.obs_steps, TINY.horizon))


def quick_plan(**kw):
    base = dict(epochs=2, steps_per_epoch=3, batch_size=8, seed=0)
    base.update(kw)
    return StagePlan(**base)


def param_bytes(net):
    return {name: p.data.tobytes() for name, p in net.named_parameters().items()}


# -- task set and plan validation ------------------------------------------


def test_taskset_rejects_duplicate_ids(tiny_tasks):
    t = tiny_tasks.tasks[0]
    with pytest.raises(ConfigurationError):
        TaskSet([t, t])


def test_plan_rejects_unknown_regime():
    with pytest.raises(ConfigurationError):
        StagePlan(regime="finetune-ish")


def test_stage_requires_registered_tasks(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    with pytest.raises(ConfigurationError):
        run_stage(net, tiny_tasks, quick_plan())


# -- multitask ----------------------------------------------------------------


def test_multitask_loss_decreases(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    res = train_multitask(net, tiny_tasks, quick_plan(epochs=8, steps_per_epoch=5,
                                                      lr=3e-4))
    first = np.mean([r.bc_loss for r in res.history[:2]])
    last = np.mean([r.bc_loss for r in res.history[-2:]])
    assert last < first
    assert res.trainable_fraction == 1.0
    assert len(res.history) == 8


def test_multitask_records_mi_and_usage(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=1)
    res = train_multitask(net, tiny_tasks, quick_plan())
    assert all(len(r.mi_per_layer) == TINY.n_blocks for r in res.history)
    for (task_id, layer), row in res.usage.items():
        assert task_id in tiny_tasks.ids and 0 <= layer < TINY.n_blocks
        assert abs(row.sum() - 1.0) < 1e-9


def test_single_task_mi_is_zero(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=2)
    res = train_multitask(net, TaskSet(tiny_tasks.tasks[:1]), quick_plan(gamma=0.5))
    for r in res.history:
        assert all(abs(v) < 1e-12 for v in r.mi_per_layer)


def test_eval_tracking_and_best_mean(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    res = train_multitask(net, tiny_tasks,
                          quick_plan(epochs=2, eval_every=1, eval_episodes=2))
    assert len(res.evals) == 2
    best = res.best_mean_success(top_n=1)
    assert set(best) == set(tiny_tasks.ids)
    assert all(0.0 <= v <= 1.0 for v in best.values())


# -- freeze masks --------------------------------------------------------------


def test_unfreeze_patterns_select_router_and_embed():
    net = DenoiserNetwork(TINY, seed=0)
    net.register_task("a")
    net.register_task("b")
    freeze_all(net)
    matched = unfreeze(net, transfer_patterns("b"))
    assert set(matched) == {f"block{i}.moe.router.b" for i in range(TINY.n_blocks)} | {
        "task_embed.b"}
    assert set(trainable_names(net)) == set(matched)


def test_trainable_fraction_counts_sizes():
    net = DenoiserNetwork(TINY, seed=0)
    net.register_task("a")
    freeze_all(net)
    unfreeze(net, ["head.*"])
    named = net.named_parameters()
    expect = (named["head.w"].data.size + named["head.b"].data.size) / sum(
        p.data.size for p in named.values())
    assert trainable_fraction(net) == pytest.approx(expect)


def test_training_touches_exactly_the_unfrozen_set(tiny_tasks):
    """Byte-level diff: frozen parameters must not change during a stage."""
    net = DenoiserNetwork(TINY, seed=0)
    net.register_task(tiny_tasks.tasks[0].task_id)
    net.register_task(tiny_tasks.tasks[1].task_id)
    freeze_all(net)
    live = set(unfreeze(net, transfer_patterns(tiny_tasks.tasks[0].task_id)))
    before = param_bytes(net)
    run_stage(net, TaskSet(tiny_tasks.tasks[:1]), quick_plan())
    after = param_bytes(net)
    changed = {n for n in before if before[n] != after[n]}
    assert changed == live


# -- continual -----------------------------------------------------------------


def test_continual_zero_epochs_no_behavior_change(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    total_before = count_parameters(net, "total")
    out = train_continual(net, tiny_tasks, composed_task,
                          quick_plan(regime="continual", epochs=0, expand_count=2))
    assert all(out.preserved.values())
    assert count_parameters(net, "total") > total_before


def test_continual_preserves_old_tasks_bit_exact(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    frozen_before = param_bytes(net)
    out = train_continual(net, tiny_tasks, composed_task,
                          quick_plan(regime="continual", epochs=3, expand_count=2))
    assert out.preserved == {"reach": True, "push": True}
    after = param_bytes(net)
    for name, blob in frozen_before.items():
        assert after[name] == blob, f"pre-existing parameter {name} changed"
    # the new task's parts did train
    new_names = set(after) - set(frozen_before)
    assert any("router.push-then-reach" in n for n in new_names)
    assert any(".moe.expert4." in n for n in new_names)  # appended past expert 0..3


def test_continual_active_params_constant_total_grows(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=1))
    ap_before = count_parameters(net, "active-per-task", "reach")
    tp_before = count_parameters(net, "total")
    train_continual(net, tiny_tasks, composed_task,
                    quick_plan(regime="continual", epochs=1, expand_count=2))
    assert count_parameters(net, "active-per-task", "reach") == ap_before
    assert count_parameters(net, "total") > tp_before


def test_continual_rejects_known_task(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=0))
    with pytest.raises(ConfigurationError):
        train_continual(net, tiny_tasks, tiny_tasks.tasks[0],
                        quick_plan(regime="continual", epochs=0))


# -- transfer ------------------------------------------------------------------


def test_transfer_trains_only_router_and_embed(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    before = param_bytes(net)
    res = train_transfer(net, composed_task, quick_plan(regime="transfer", epochs=2))
    after = param_bytes(net)
    changed = {n for n in before if before[n] != after[n]}
    assert changed == set(), "pre-existing parameters changed during transfer"
    assert set(res.trainable_names) == {
        f"block{i}.moe.router.push-then-reach" for i in range(TINY.n_blocks)} | {
        "task_embed.push-then-reach"}


def test_transfer_fraction_below_one_percent_at_desk_config():
    net = DenoiserNetwork(ModelConfig(), seed=0)  # N=4, M=64, L=8, K=2
    net.register_task("reach")
    net.register_task("push")
    freeze_all(net)
    net.register_task("new")
    unfreeze(net, transfer_patterns("new"))
    assert trainable_fraction(net) < 0.01


def test_transfer_fraction_below_half_percent_at_full_size():
    """Router-only trainable share at the full-size configuration
    (12 blocks, width 512, 8 experts, top-2)."""
    net = DenoiserNetwork(ModelConfig(n_blocks=12, embed_dim=512, n_heads=8,
                                      encoder_hidden=1024), seed=0)
    net.register_task("a")
    net.register_task("b")
    freeze_all(net)
    net.register_task("new")
    unfreeze(net, transfer_patterns("new"))
    assert trainable_fraction(net) < 0.005


def test_transfer_rejects_existing_task(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=0))
    with pytest.raises(ConfigurationError):
        train_transfer(net, tiny_tasks.tasks[0], quick_plan(regime="transfer"))


# -- full fine-tune --------------------------------------------------------------


def test_full_finetune_unfreezes_everything(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    freeze_all(net)
    res = train_full_finetune(net, composed_task,
                              quick_plan(regime="full-finetune", epochs=1))
    assert res.trainable_fraction == 1.0


def test_full_finetune_zero_epochs_no_change(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    before = param_bytes(net)
    train_full_finetune(net, tiny_tasks.tasks[1],
                        quick_plan(regime="full-finetune", epochs=0))
    assert param_bytes(net) == before


# -- score traces and usage geometry ----------------------------------------------


def test_score_trace_rows_are_distributions(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=1))
    train_transfer(net, composed_task, quick_plan(regime="transfer", epochs=1))
    traces = expert_score_trace(net, "push-then-reach", "push-then-reach",
                                composed_task.windows.stats, episodes=2, seed=9)
    assert len(traces) == 2
    for tr in traces:
        assert tr.scores.shape[0] == tr.phases.shape[0] > 0
        assert tr.scores.shape[1] == TINY.n_experts
        assert np.allclose(tr.scores.sum(axis=1), 1.0, atol=1e-5)
        assert set(np.unique(tr.phases)) <= {1, 2}


def test_score_trace_rejects_bad_layer(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=0))
    with pytest.raises(ConfigurationError):
        expert_score_trace(net, "reach", "reach", tiny_tasks.tasks[0].windows.stats,
                           episodes=1, seed=0, layer=99)


def test_usage_cosines_orthogonal_and_identical_rows():
    usage = {("a", 0): np.array([1.0, 0.0, 0.0, 0.0]),
             ("b", 0): np.array([0.0, 1.0, 0.0, 0.0]),
             ("a", 1): np.array([0.5, 0.5, 0.0, 0.0]),
             ("b", 1): np.array([0.5, 0.5, 0.0, 0.0])}
    cos = usage_cosines(usage)
    assert cos[0] == pytest.approx(0.0)
    assert cos[1] == pytest.approx(1.0)


def test_evaluate_network_is_seed_deterministic(tiny_tasks):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan(epochs=1))
    t = tiny_tasks.tasks[0]
    sch = DiffusionSchedule(TINY.t_diff)
    r1 = evaluate_network(net, t, sch, episodes=3, seed=7)
    r2 = evaluate_network(net, t, sch, episodes=3, seed=7)
    assert r1.successes == r2.successes
    for a, b in zip(r1.traces, r2.traces):
        assert np.array_equal(a, b)


# -- EMA and lr schedule --------------------------------------------------------


def test_ema_published_weights_differ_from_raw_and_are_deterministic(tiny_tasks):
    runs = []
    for _ in range(2):
        net = DenoiserNetwork(TINY, seed=0)
        train_multitask(net, tiny_tasks, quick_plan(ema=0.9))
        runs.append(param_bytes(net))
    assert runs[0] == runs[1]
    raw = DenoiserNetwork(TINY, seed=0)
    train_multitask(raw, tiny_tasks, quick_plan())
    assert runs[0] != param_bytes(raw)


def test_ema_leaves_frozen_parameters_untouched(tiny_tasks, composed_task):
    net = DenoiserNetwork(TINY, seed=0)
    train_multitask(net, tiny_tasks, quick_plan())
    before = param_bytes(net)
    freeze_all(net)
    net.register_task(composed_task.task_id)
    unfreeze(net, transfer_patterns(composed_task.task_id))
    run_stage(net, TaskSet([composed_task]), quick_plan(regime="transfer", ema=0.9))
    after = param_bytes(net)
    pats = transfer_patterns(composed_task.task_id)
    for name in before:
        if not any(fnmatch.fnmatch(name, p) for p in pats):
            assert after[name] == before[name], name


def test_ema_decay_validated():
    with pytest.raises(ConfigurationError):
        StagePlan(ema=1.0)


def test_cosine_lr_changes_trajectory(tiny_tasks):
    flat = DenoiserNetwork(TINY, seed=0)
    train_multitask(flat, tiny_tasks, quick_plan())
    decayed = DenoiserNetwork(TINY, seed=0)
    train_multitask(decayed, tiny_tasks, quick_plan(cosine_lr=True))
    assert param_bytes(flat) != param_bytes(decayed)
