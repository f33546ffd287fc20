"""Checkpoint format tests: bit-exact round-trips, structural replay of
expanded networks, corruption detection, and lineage hashes."""

import numpy as np
import pytest

from moepolicy import tensor as T
from moepolicy.checkpoint import (FORMAT_VERSION, MAGIC, file_sha256, load_checkpoint,
                                  save_checkpoint, verify_lineage)
from moepolicy.data import FormatError, build_windows, generate_dataset
from moepolicy.diffusion import DenoiserNetwork, ModelConfig
from moepolicy.lifecycle import StagePlan, Task, TaskSet, train_continual, train_multitask

CFG = ModelConfig(n_blocks=2, embed_dim=32, n_heads=2, n_experts=4, top_k=2,
                  expert_expansion=1, t_diff=4, encoder_hidden=32)


def small_net(seed=0, tasks=("reach", "push")):
    net = DenoiserNetwork(CFG, seed=seed)
    for tid in tasks:
        net.register_task(tid)
    return net


def probe(net, task_id, seed=11):
    rng = T.new_rng(seed)
    obs = rng.standard_normal((3, CFG.obs_steps, CFG.state_dim))
    noisy = rng.standard_normal((3, CFG.horizon, CFG.action_dim))
    t_idx = np.array([1, 2, 3])
    with T.no_grad():
        return net.forward(task_id, obs, noisy, t_idx).data.copy()


def test_round_trip_is_bit_exact(tmp_path):
    net = small_net()
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    save_checkpoint(net, p1, stage="base")
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded.net, p2, stage="base")
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_loaded_network_forwards_identically(tmp_path):
    net = small_net(seed=3)
    ref = {tid: probe(net, tid) for tid in net.tasks}
    path = str(tmp_path / "n.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path).net
    for tid, out in ref.items():
        assert np.array_equal(out, probe(loaded, tid))


def test_frozen_flags_survive(tmp_path):
    net = small_net()
    for name, p in net.named_parameters().items():
        p.frozen = name.startswith("block0")
    path = str(tmp_path / "f.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path).net
    for name, p in loaded.named_parameters().items():
        assert p.frozen == name.startswith("block0")


def test_expanded_network_round_trips(tmp_path):
    """Continual-stage networks carry per-layer expert pools that outgrew the
    config; the structural replay must reproduce them exactly."""
    tasks = []
    for env_id in ("reach", "push"):
        ds = generate_dataset(env_id, n=4, seed=1)
        tasks.append(Task(env_id, env_id, build_windows(ds, CFG.obs_steps, CFG.horizon)))
    ds = generate_dataset("push-then-reach", n=3, seed=2)
    new = Task("push-then-reach", "push-then-reach",
               build_windows(ds, CFG.obs_steps, CFG.horizon))
    net = DenoiserNetwork(CFG, seed=0)
    plan = StagePlan(epochs=1, steps_per_epoch=2, batch_size=8)
    train_multitask(net, TaskSet(tasks), plan)
    train_continual(net, TaskSet(tasks), new,
                    StagePlan(regime="continual", epochs=1, steps_per_epoch=2,
                              batch_size=8, expand_count=2))
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path).net
    for block, orig in zip(loaded.blocks, net.blocks):
        assert block.moe.n_experts == orig.moe.n_experts == CFG.n_experts + 2
        assert [e.stage for e in block.moe.experts] == [e.stage for e in orig.moe.experts]
        for tid in net.tasks:
            assert (block.moe.router_for(tid).n_addressable
                    == orig.moe.router_for(tid).n_addressable)
    for tid in net.tasks:
        assert np.array_equal(probe(net, tid), probe(loaded, tid))


def test_dense_baseline_round_trips(tmp_path):
    cfg = ModelConfig(**{**CFG.to_dict(), "dense_ffn": True})
    net = DenoiserNetwork(cfg, seed=0)
    net.register_task("reach")
    path = str(tmp_path / "d.ckpt")
    save_checkpoint(net, path)
    loaded = load_checkpoint(path).net
    assert loaded.cfg.dense_ffn
    rng = T.new_rng(5)
    obs = rng.standard_normal((2, cfg.obs_steps, cfg.state_dim))
    noisy = rng.standard_normal((2, cfg.horizon, cfg.action_dim))
    with T.no_grad():
        a = net.forward("reach", obs, noisy, np.array([1, 2])).data
        b = loaded.forward("reach", obs, noisy, np.array([1, 2])).data
    assert np.array_equal(a, b)


def test_norm_stats_and_usage_round_trip(tmp_path):
    ds = generate_dataset("reach", n=4, seed=1)
    net = small_net()
    usage = {("reach", 0): np.array([0.5, 0.25, 0.25, 0.0]),
             ("push", 1): np.array([0.0, 0.0, 0.5, 0.5])}
    path = str(tmp_path / "s.ckpt")
    save_checkpoint(net, path, norm_stats={"reach": ds.stats}, usage=usage,
                    stage="multitask")
    loaded = load_checkpoint(path)
    assert loaded.meta.stage == "multitask"
    assert set(loaded.norm_stats) == {"reach"}
    np.testing.assert_array_equal(loaded.norm_stats["reach"].action_min,
                                  ds.stats.action_min)
    for key, row in usage.items():
        np.testing.assert_array_equal(loaded.usage[key], row)


def test_corrupt_magic_rejected(tmp_path):
    net = small_net()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(net, path)
    blob = bytearray(open(path, "rb").read())
    blob[:4] = b"XXXX"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    net = small_net()
    path = str(tmp_path / "v.ckpt")
    save_checkpoint(net, path)
    blob = bytearray(open(path, "rb").read())
    blob[4] = FORMAT_VERSION + 1
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    net = small_net()
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(net, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-17])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    net = small_net()
    path = str(tmp_path / "tb.ckpt")
    save_checkpoint(net, path)
    with open(path, "ab") as f:
        f.write(b"\x00\x00\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_lineage_hash_chain(tmp_path):
    net = small_net()
    parent = str(tmp_path / "parent.ckpt")
    child = str(tmp_path / "child.ckpt")
    other = str(tmp_path / "other.ckpt")
    save_checkpoint(net, parent, stage="base")
    save_checkpoint(net, child, stage="next", parent=parent)
    save_checkpoint(net, other, stage="unrelated")
    verify_lineage(child, parent)
    with pytest.raises(FormatError, match="lineage"):
        verify_lineage(child, other)
    loaded = load_checkpoint(child)
    assert loaded.meta.parent_sha256 == file_sha256(parent)
    assert loaded.sha256 == file_sha256(child)


def test_save_is_deterministic(tmp_path):
    net = small_net(seed=4)
    p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
    assert save_checkpoint(net, p1) == save_checkpoint(net, p2)
