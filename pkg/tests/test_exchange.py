import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentsim import SimConfig, get_preset
from agentsim.engine import registry
from agentsim.engine.simulation import Driver
from agentsim.engine.store import AgentRecord, BehaviorInstance, GlobalAgentId
from agentsim.exchange.delta import (
    CODECS,
    FLAG_DELTA,
    ChannelDecoder,
    ChannelEncoder,
    EpochMismatchError,
    Reference,
    decode_message,
    delta_encode,
    full_encode,
    unpack_message,
)
from agentsim.exchange.distributed import apportion
from agentsim.exchange.partition import PartitionError, partition_space, rank_grid_for
from agentsim.exchange.serialization import (
    HEADER,
    NODE,
    DecodeError,
    deserialize,
    encode_blocks,
    records_to_columns,
    serialize,
)
from agentsim.exchange.transport import Transport, TransportError
from agentsim.verify import random_records

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("AGENTSIM_REGEN_GOLDEN") == "1"


def rec(gid, x=0.0, behaviors=(), kind=registry.CELL.tag, **kw):
    return AgentRecord(position=(x, 1.0, 2.0), diameter=1.5, kind_tag=kind, behaviors=list(behaviors),
                       rng_key=gid, global_id=GlobalAgentId(0, gid), **kw)


def blocks_of(records):
    cols, beh = records_to_columns(records)
    return encode_blocks(cols, beh)


def keys_of(batch):
    return batch.columns["gid_counter"].tolist()


# -- partitioning ---------------------------------------------------------------

def test_single_rank_owns_everything():
    pm = partition_space(0.0, 100.0, 1, 10.0)
    assert pm.rank_grid == (1, 1, 1)
    assert pm.owner_of([[-50, 3, 1e6], [50, 50, 50]]).tolist() == [0, 0]


def test_rank_grids():
    assert rank_grid_for(2) == (2, 1, 1)
    assert rank_grid_for(4) == (2, 2, 1)
    assert rank_grid_for(8) == (2, 2, 2)
    assert rank_grid_for(7) == (7, 1, 1)


def test_two_ranks_split_into_slabs():
    pm = partition_space(0.0, 100.0, 2, 10.0)
    assert pm.owner_of([[10, 90, 90], [60, 0, 0]]).tolist() == [0, 1]
    lo, hi = pm.bounds(0)
    assert lo[0] == -np.inf and hi[0] == 50.0


def test_partition_factor_widens_boxes():
    pm = partition_space(0.0, 100.0, 2, 10.0, factor=3)
    assert pm.box_length == 30.0 and pm.boxes == 4
    assert pm.owner_of([[59.0, 0, 0], [61.0, 0, 0]]).tolist() == [0, 1]


def test_partition_rejects_bad_input():
    with pytest.raises(PartitionError):
        partition_space(0.0, 100.0, 3, 10.0, rank_grid=(2, 1, 1))
    with pytest.raises(PartitionError):
        partition_space(0.0, 10.0, 8, 10.0)
    with pytest.raises(PartitionError):
        partition_space(0.0, 100.0, 2, 10.0, factor=0)


@settings(max_examples=25)
@given(ranks=st.integers(1, 12), factor=st.integers(1, 3),
       pts=st.lists(st.tuples(*[st.floats(-300, 400)] * 3), min_size=1, max_size=50))
def test_bricks_tile_space(ranks, factor, pts):
    pm = partition_space(0.0, 250.0, ranks, 10.0, factor)
    p = np.array(pts)
    owner = pm.owner_of(p)
    assert np.all((owner >= 0) & (owner < ranks))
    # every point lies inside exactly its owner's brick
    for r in range(ranks):
        inside = pm.distance_to(p, r) == 0.0
        assert np.all(inside[owner == r])
    assert sum(pm.volume_fraction(r) for r in range(ranks)) == pytest.approx(1.0)


def test_apportion_examples():
    assert apportion(1000, [0.5, 0.5]).tolist() == [500, 500]
    assert apportion(10, [1, 1, 1]).tolist() == [4, 3, 3]
    assert apportion(0, [1, 2]).tolist() == [0, 0]
    with pytest.raises(ValueError):
        apportion(5, [0, 0])


@given(total=st.integers(0, 10**6), w=st.lists(st.floats(0.01, 100), min_size=1, max_size=16))
def test_apportion_sums_and_stays_near_quota(total, w):
    out = apportion(total, w)
    assert out.sum() == total
    quota = total * np.array(w) / np.sum(w)
    assert np.all(np.abs(out - quota) < 1.0 + 1e-9)


# -- serialization --------------------------------------------------------------

def test_empty_serializes_to_header_only():
    data = serialize([])
    assert len(data) == HEADER.size
    assert deserialize(data) == []


def test_behaviors_become_children():
    beh = [BehaviorInstance(registry.GROW_DIVIDE.tag, (1.0, 2.0)), BehaviorInstance(registry.SECRETION.tag, (0.5,))]
    out = deserialize(serialize([rec(1, behaviors=beh)]))
    assert len(out[0].behaviors) == 2
    assert out[0].behaviors == beh


def test_adding_a_behavior_adds_a_child():
    beh = [BehaviorInstance(registry.GROW_DIVIDE.tag), BehaviorInstance(registry.SECRETION.tag, (0.5,)),
           BehaviorInstance(registry.CHEMOTAXIS.tag, (0.75,), copy_on_division=True)]
    out = deserialize(serialize([rec(1, behaviors=beh)]))
    assert len(out[0].behaviors) == 3 and out[0].behaviors[2].copy_on_division


def test_unknown_kind_rejected():
    data = bytearray(serialize([rec(1)]))
    NODE.pack_into(data, HEADER.size, 999, NODE.unpack_from(data, HEADER.size)[1])
    with pytest.raises(DecodeError) as err:
        deserialize(bytes(data))
    assert err.value.offset == HEADER.size


@pytest.mark.parametrize("cut", [3, HEADER.size + 5, -1])
def test_truncation_rejected(cut):
    data = serialize([rec(1, behaviors=[BehaviorInstance(registry.GROW_DIVIDE.tag, (1.0,))])])
    with pytest.raises(DecodeError):
        deserialize(data[:cut])


def test_bad_magic_rejected():
    with pytest.raises(DecodeError):
        deserialize(b"XXXX" + serialize([])[4:])


def test_serialize_rejects_unregistered_behavior():
    with pytest.raises(KeyError):
        serialize([rec(1, behaviors=[BehaviorInstance(99)])])


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 40))
def test_round_trip_random_records(seed, n):
    recs = random_records(np.random.default_rng(seed), n)
    assert deserialize(serialize(recs)) == recs


def _golden_records():
    return [
        rec(1, 1.0, [BehaviorInstance(registry.GROW_DIVIDE.tag, (12.6, 50.0), False, True)], age=4),
        rec(2, 2.0, [BehaviorInstance(registry.INFECTION.tag, (0.3, 3.2)),
                     BehaviorInstance(registry.RECOVERY.tag, (0.005,))], kind=registry.PERSON.tag, state=1),
        rec(3, 3.0, [], kind=registry.TUMOR_CELL.tag, age=90, static_flag=True),
    ]


@pytest.mark.parametrize("name", ["agents.bin", "delta.bin"])
def test_golden_bytes(name):
    recs = _golden_records()
    if name == "agents.bin":
        data = serialize(recs)
    else:
        ref = Reference(1, blocks_of(recs))
        data, _ = delta_encode(blocks_of([recs[0], recs[2], rec(4, 4.0)]), ref, CODECS["identity"])
    path = GOLDEN / name
    if REGEN:
        path.parent.mkdir(exist_ok=True)
        path.write_bytes(data)
    assert path.read_bytes() == data


# -- delta encoding --------------------------------------------------------------

def test_delta_missing_agent_becomes_placeholder():
    a, b, c = rec(1), rec(2, 5.0), rec(3, 9.0)
    ref = Reference(1, blocks_of([a, b, c]))
    msg, kept = delta_encode(blocks_of([c, a]), ref)
    batch, _, flags = decode_message(msg, ref)
    assert flags & FLAG_DELTA
    # reference order wins: A, placeholder for B, C
    assert keys_of(batch) == [1, 3]
    assert len(kept) == 2


def test_delta_new_agent_appended():
    a, d = rec(1), rec(4, 7.0)
    ref = Reference(1, blocks_of([a]))
    msg, _ = delta_encode(blocks_of([d, a]), ref)
    batch, _, _ = decode_message(msg, ref)
    assert keys_of(batch) == [1, 4]


def test_identical_message_has_zero_body():
    blocks = blocks_of([rec(1), rec(2, 3.0)])
    ref = Reference(1, blocks)
    msg, _ = delta_encode(blocks, ref, CODECS["identity"])
    _, _, body = unpack_message(msg)
    assert len(body) == len(ref.stream) and not any(body)


def test_all_missing_decodes_empty():
    ref = Reference(1, blocks_of([rec(1), rec(2)]))
    msg, kept = delta_encode([], ref)
    batch, _, _ = decode_message(msg, ref)
    assert len(batch) == 0 and kept == []


def test_delta_needs_matching_epoch():
    ref = Reference(2, blocks_of([rec(1)]))
    msg, _ = delta_encode(blocks_of([rec(1)]), ref)
    with pytest.raises(EpochMismatchError):
        decode_message(msg, Reference(1, ref.blocks))
    with pytest.raises(EpochMismatchError):
        decode_message(msg, None)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32 - 1), n_ref=st.integers(0, 25), keep=st.floats(0, 1), n_new=st.integers(0, 10))
def test_delta_preserves_agent_set(seed, n_ref, keep, n_new):
    g = np.random.default_rng(seed)
    old = random_records(g, n_ref)
    ref = Reference(1, blocks_of(old))
    survivors = [r for r in old if g.random() < keep]
    for r in survivors:
        r.position = r.position + g.normal(size=3)
    new = survivors + random_records(g, n_new, gid_start=10_000)
    g.shuffle(new)
    msg, _ = delta_encode(blocks_of(new), ref)
    batch, _, _ = decode_message(msg, ref)
    full = decode_message(full_encode(blocks_of(new)), None)[0]
    by_gid = lambda b: {(int(r), int(c)): b.columns["position"][i].tolist()
                        for i, (r, c) in enumerate(zip(b.columns["gid_rank"], b.columns["gid_counter"]))}
    assert by_gid(batch) == by_gid(full)


def _stream(g, steps, n=30):
    """Drifting population with turnover, one block list per step."""
    pop = random_records(g, n)
    nxt = n
    out = []
    for _ in range(steps):
        for r in pop:
            r.position = r.position + g.normal(scale=0.1, size=3)
        if g.random() < 0.5 and pop:
            pop.pop(int(g.integers(len(pop))))
        if g.random() < 0.5:
            pop += random_records(g, 1, gid_start=nxt)
            nxt += 1
        out.append(blocks_of(pop))
    return out


@pytest.mark.parametrize("ref_update", [1, 3, 10])
def test_channel_epochs_and_digests(ref_update):
    enc, dec = ChannelEncoder(ref_update=ref_update), ChannelDecoder(ref_update=ref_update)
    epochs = []
    for blocks in _stream(np.random.default_rng(5), 25):
        batch = dec.decode(enc.encode(blocks))
        assert len(batch) == len(blocks)
        assert enc.digest() == dec.digest()
        epochs.append(enc.epoch)
    assert all(b >= a for a, b in zip(epochs, epochs[1:]))
    assert epochs[-1] == -(-25 // ref_update)


def test_reference_interval_changes_size_not_content():
    decoded, sizes = {}, {}
    for ru in (1, 10):
        enc, dec = ChannelEncoder(ref_update=ru), ChannelDecoder(ref_update=ru)
        out, total = [], 0
        for blocks in _stream(np.random.default_rng(9), 30):
            msg = enc.encode(blocks)
            total += len(msg)
            b = dec.decode(msg)
            out.append(sorted(zip(b.columns["gid_counter"].tolist(), b.columns["position"].tolist())))
        decoded[ru], sizes[ru] = out, total
    assert decoded[1] == decoded[10]
    assert sizes[1] != sizes[10]


def test_fallback_resets_reference():
    enc, dec = ChannelEncoder(), ChannelDecoder()
    blocks = blocks_of([rec(1), rec(2)])
    dec.decode(enc.encode(blocks))
    msg = enc.encode(blocks, fallback=True)
    assert not unpack_message(msg)[0] & FLAG_DELTA
    dec.decode(msg)
    assert enc.digest() == dec.digest()


def test_message_size_ordering():
    blocks = blocks_of(random_records(np.random.default_rng(2), 200))
    ref = Reference(1, blocks)
    delta, _ = delta_encode(blocks, ref, CODECS["zlib"])
    packed = full_encode(blocks, codec=CODECS["zlib"])
    plain = full_encode(blocks)
    assert len(delta) < len(packed) <= len(plain)


def test_message_size_ordering_on_clustering_workload():
    from agentsim.exchange.distributed import WIRE_COLUMNS

    d = _driver("clustering", 1, steps=5, params=dict(n_cells=300, space_length=120.0, resolution=24))
    try:
        s = d.engines[0].store
        idx = np.arange(s.count)
        s.ensure_global_ids(idx)
        blocks = encode_blocks({k: s.column(k)[idx] for k in WIRE_COLUMNS}, [s.behaviors[i] for i in idx])
    finally:
        d.close()
    delta, _ = delta_encode(blocks, Reference(1, blocks), CODECS["zlib"])
    packed = full_encode(blocks, codec=CODECS["zlib"])
    plain = full_encode(blocks)
    assert len(delta) < len(packed) <= len(plain)


def test_delta_off_sends_full_frames():
    enc, dec = ChannelEncoder(delta=False), ChannelDecoder(delta=False)
    blocks = blocks_of([rec(1)])
    for _ in range(3):
        msg = enc.encode(blocks)
        assert not unpack_message(msg)[0] & FLAG_DELTA
        assert len(dec.decode(msg)) == 1
    assert enc.reference is None


def test_ref_update_validated():
    with pytest.raises(ValueError):
        ChannelEncoder(ref_update=0)


# -- transport -------------------------------------------------------------------

def test_transport_chunks_and_reassembles():
    t = Transport(3, batch_bytes=7)
    payload = bytes(range(50))
    t.send(0, 2, "x", payload)
    t.send(0, 2, "x", b"")
    t.send(1, 2, "x", b"abc")
    assert t.chunks_sent == 8 + 1 + 1
    assert t.recv_all(2, "x") == [(0, payload), (0, b""), (1, b"abc")]
    assert t.pending() == 0


def test_transport_errors():
    t = Transport(2)
    with pytest.raises(TransportError):
        t.send(0, 5, "x", b"")
    with pytest.raises(TransportError):
        t.recv(1, 0, "x")


# -- distributed runs --------------------------------------------------------------

def _driver(preset, ranks, steps=0, **kw):
    params = kw.pop("params", {})
    d = Driver(get_preset(preset, **params), SimConfig(ranks=ranks, **kw))
    d.run(steps)
    return d


def test_aura_holds_exactly_the_border_agents():
    d = _driver("sir", 3, params=dict(n_susceptible=600, n_infected=10))
    try:
        t = {k: 0.0 for k in ("setup_teardown", "sorting")}
        for e in d.engines:
            e.prepare(0, t)
        d.exchanger.aura(0)
        pm = d.exchanger.partition
        L = d.model.interaction_length + d.model.aura_margin
        for q, e in enumerate(d.engines):
            s = e.store
            expect = set()
            for r, other in enumerate(d.engines):
                if r != q:
                    o = other.store
                    near = pm.distance_to(o.position[:o.count], q) <= L
                    expect |= set(o.rng_key[:o.count][near].tolist())
            assert set(s.rng_key[s.count:s.total].tolist()) == expect
            assert s.is_ghost(s.count) or s.total == s.count
    finally:
        d.close()


def test_ghosts_are_read_only():
    d = _driver("sir", 2, params=dict(n_susceptible=300, n_infected=5))
    try:
        t = {k: 0.0 for k in ("setup_teardown", "sorting")}
        for e in d.engines:
            e.prepare(0, t)
        d.exchanger.aura(0)
        s = d.engines[0].store
        assert s.total > s.count
        with pytest.raises(Exception):
            s.set_position(s.count, (1.0, 1.0, 1.0))
    finally:
        d.close()


def test_no_migration_when_nothing_moves():
    d = _driver("sir", 2, steps=5, params=dict(n_susceptible=300, n_infected=5, max_movement=0.0))
    try:
        assert d.report().exchange_stats["migration_bytes"] == [0] * 5
    finally:
        d.close()


def test_migration_conserves_agents_and_ids():
    d = _driver("sir", 4, params=dict(n_susceptible=400, n_infected=20))
    try:
        keys0 = np.sort(d.view.column("rng_key"))
        seen = {}
        for _ in range(15):
            d.step()
            v = d.view
            assert np.array_equal(np.sort(v.column("rng_key")), keys0)
            for k, r, c in zip(v.column("rng_key"), v.column("gid_rank"), v.column("gid_counter")):
                if r >= 0:
                    assert seen.setdefault(int(k), (int(r), int(c))) == (int(r), int(c))
        gids = [g for g in seen.values()]
        assert len(set(gids)) == len(gids)
        assert d.report().exchange_stats["migrated"] > 0
    finally:
        d.close()


def test_collective_lookup_for_far_destinations():
    # wrapping across the torus jumps from the last slab to the first, which are not neighbors
    d = _driver("sir", 3, steps=10, rank_grid=(3, 1, 1), params=dict(n_susceptible=600, n_infected=10))
    try:
        assert d.report().exchange_stats.get("lookups", 0) > 0
        assert d.agent_count == 610
    finally:
        d.close()


def test_filtered_init_matches_single_rank():
    one = _driver("spheroid", 1, params=dict(n_cells=200))
    many = _driver("spheroid", 4, params=dict(n_cells=200))
    try:
        for col in ("rng_key", "position", "diameter"):
            np.testing.assert_array_equal(one.view.column(col), many.view.column(col))
        pm = many.exchanger.partition
        for r, e in enumerate(many.engines):
            assert np.all(pm.owner_of(e.store.position[:e.store.count]) == r)
    finally:
        one.close()
        many.close()


def test_proportional_init_splits_by_volume():
    # a radius of 5 gives 20 boxes per axis, so the two slabs are equal
    d = _driver("sir", 2, init_mode="proportional", params=dict(n_susceptible=990, n_infected=10, infection_radius=5.0))
    try:
        assert [e.store.count for e in d.engines] == [500, 500]
        pm = d.exchanger.partition
        for r, e in enumerate(d.engines):
            assert np.all(pm.owner_of(e.store.position[:e.store.count]) == r)
        assert np.array_equal(np.sort(d.view.column("rng_key")), np.arange(1000))
        # states stay mixed across ranks
        assert all(np.any(e.store.state[:e.store.count] == 1) for e in d.engines)
    finally:
        d.close()


def test_proportional_init_uneven_bricks():
    # 31 boxes per axis split 15/16
    d = _driver("sir", 2, init_mode="proportional", params=dict(n_susceptible=990, n_infected=10))
    try:
        assert [e.store.count for e in d.engines] == [486, 514]
    finally:
        d.close()


def test_proportional_init_falls_back_for_clustered_presets():
    d = _driver("spheroid", 2, init_mode="proportional", params=dict(n_cells=100))
    try:
        assert d.exchanger.counters["proportional_fallback"] == 1
        assert d.agent_count == 100
    finally:
        d.close()


@pytest.mark.parametrize("delta,compress", [(True, True), (False, True), (True, False), (False, False)])
def test_wire_options_do_not_change_results(delta, compress):
    params = dict(n_cells=150)
    base = _driver("spheroid", 1, steps=8, params=params)
    d = _driver("spheroid", 2, steps=8, delta=delta, compress=compress, params=params)
    try:
        for col in ("rng_key", "position", "diameter"):
            np.testing.assert_array_equal(base.view.column(col), d.view.column(col))
        for enc, dec in d.exchanger.digests().values():
            assert enc == dec
    finally:
        base.close()
        d.close()


@pytest.mark.parametrize("preset,params", [
    ("spheroid", {"n_cells": 800, "division_probability": 1.0}),
    ("clustering", {"n_cells": 300, "space_length": 120.0, "resolution": 24, "gradient_weight": 3.0}),
])
def test_self_movement_before_queries_stays_transparent(preset, params):
    # division shifts and chemotaxis move an agent before its neighbor query; the aura must reach that far
    one = _driver(preset, 1, steps=30, params=params)
    four = _driver(preset, 4, steps=30, params=params)
    try:
        for col in ("rng_key", "position", "diameter"):
            np.testing.assert_array_equal(one.view.column(col), four.view.column(col))
    finally:
        one.close()
        four.close()


def test_agent_exactly_at_strip_edge_is_sent():
    from tests.test_models import FixedSir

    probe = FixedSir([[50.0, 50, 50]], [0])
    pm = partition_space(0.0, 100.0, 2, probe.interaction_length)
    L = probe.interaction_length
    edge = pm.bounds(1)[0][0]
    # walk down from the border until the distance is exactly L, then one ulp further
    x = edge - L
    while pm.distance_to([[x, 50, 50]], 1)[0] < L:
        x = np.nextafter(x, -np.inf)
    while pm.distance_to([[x, 50, 50]], 1)[0] > L:
        x = np.nextafter(x, np.inf)
    far = np.nextafter(x, -np.inf)
    assert pm.distance_to([[far, 50, 50]], 1)[0] > L
    m = FixedSir([[x, 50, 50], [far, 60, 50], [10, 10, 10]], [0, 0, 0], max_movement=0.0)
    d = Driver(m, SimConfig(ranks=2))
    try:
        t = {k: 0.0 for k in ("setup_teardown", "sorting")}
        for e in d.engines:
            e.prepare(0, t)
        d.exchanger.aura(0)
        s = d.engines[1].store
        assert s.rng_key[s.count:s.total].tolist() == [0]
        assert d.engines[0].store.total == d.engines[0].store.count
    finally:
        d.close()


def test_grid_of_cells_needs_no_initial_migration():
    d = _driver("proliferation", 2, steps=1)
    try:
        assert d.report().exchange_stats["migration_bytes"] == [0]
        assert d.report().exchange_stats.get("migrated", 0) == 0
    finally:
        d.close()


def test_concurrent_global_ids_never_collide():
    from agentsim.engine.store import AgentStore

    ids = []
    for rank in (0, 1):
        s = AgentStore()
        s.rank = rank
        n = 500_000
        s.append_columns({"position": np.zeros((n, 3)), "diameter": np.ones(n),
                          "kind": np.full(n, registry.CELL.tag, np.int32)}, [()] * n)
        for chunk in np.array_split(np.arange(n), 7):
            s.ensure_global_ids(chunk)
        s.ensure_global_ids(np.arange(n))  # idempotent
        ids.append(s.gid_rank[:n].astype(np.int64) << 32 | s.gid_counter[:n])
    allids = np.concatenate(ids)
    assert np.unique(allids).size == 1_000_000


def test_lost_reference_triggers_full_resend():
    params = dict(n_cells=150)
    base = _driver("spheroid", 1, steps=12, params=params)
    d = _driver("spheroid", 2, steps=4, params=params)
    try:
        # simulate a receiver that dropped its reference and one that silently diverged
        d.exchanger.decoders[(0, 1)].reset()
        dec = d.exchanger.decoders[(1, 0)]
        dec.reference = Reference(dec.reference.epoch, dec.reference.blocks[1:])
        d.run(8)
        assert d.exchanger.counters["resyncs"] == 2
        for col in ("rng_key", "position", "diameter"):
            np.testing.assert_array_equal(base.view.column(col), d.view.column(col))
        for enc, dec in d.exchanger.digests().values():
            assert enc == dec
    finally:
        base.close()
        d.close()
