import pytest

from ebp import control, harness
from ebp.control import UploadPolicy
from ebp.errors import E_NET, E_UNKNOWN_NODE, EbpError
from ebp.harness import CorruptDirective, FaultPlan, RefuseTransfers, SimClock


def test_spawn_single_depot_serves_allocate():
    with harness.spawn_cluster(1, seed=1) as cluster:
        with cluster.client("d0") as client:
            caps = client.allocate(64, 60)
            assert caps[0].node_id == "d0"


def test_spawn_chain_has_expected_edges():
    with harness.spawn_cluster(4, seed=1) as cluster:
        assert cluster.graph.edges == {("d0", "d1"), ("d1", "d2"), ("d2", "d3")}
        assert cluster.depot("d0").config.allowed_adjacent == {"d1"}
        assert cluster.depot("d3").config.allowed_adjacent == set()


def test_spawn_zero_rejected():
    with pytest.raises(ValueError):
        harness.spawn_cluster(0)


@pytest.mark.parametrize("topology,expected_edges", [
    ("ring", 4), ("star", 6), ("full", 12),
])
def test_other_topologies(topology, expected_edges):
    with harness.spawn_cluster(4, topology=topology, seed=1) as cluster:
        assert len(cluster.graph.edges) == expected_edges


def test_clock_advances_compose_and_trigger_sweeps():
    with harness.spawn_cluster(1, seed=2) as cluster:
        with cluster.client("d0") as client:
            caps = client.allocate(64, 10)
            assert cluster.advance_clock(0) == 0.0
            assert cluster.advance_clock(4) == 4.0
            assert cluster.advance_clock(7) == 11.0
            with pytest.raises(EbpError) as err:
                client.read(caps[0], 0, 1)
            assert err.value.code == "E_EXPIRED"


def test_clock_rejects_negative_delta():
    clock = SimClock()
    with pytest.raises(EbpError):
        clock.advance(-1)


def test_stop_makes_depot_unreachable():
    with harness.spawn_cluster(2, seed=3) as cluster:
        cluster.inject_fault(FaultPlan(stop=["d1"]))
        with pytest.raises(EbpError) as err:
            cluster.client("d1", timeout=2).allocate(16, 60)
        assert err.value.code == E_NET
        # d0 keeps serving
        with cluster.client("d0") as c0:
            c0.allocate(16, 60)


def test_corrupt_identity_mask_is_noop():
    with harness.spawn_cluster(1, seed=4) as cluster:
        with cluster.client("d0") as client:
            caps = client.allocate(16, 60)
            client.write(caps[1], 0, b"stable")
            cluster.inject_fault(FaultPlan(corrupt=[
                CorruptDirective("d0", lambda a: True, 0, 0x00)]))
            assert client.read(caps[0], 0, 6) == b"stable"


def test_corrupt_flips_selected_byte_only():
    with harness.spawn_cluster(1, seed=5) as cluster:
        with cluster.client("d0") as client:
            caps = client.allocate(16, 60)
            client.write(caps[1], 0, bytes(16))
            cluster.inject_fault(FaultPlan(corrupt=[
                CorruptDirective("d0", lambda a: a == caps[0].alloc_id, 3, 0xFF)]))
            assert client.read(caps[0], 0, 16) == bytes(3) + b"\xff" + bytes(12)


def test_fault_isolation_between_depots():
    with harness.spawn_cluster(2, seed=6) as cluster:
        with cluster.client("d0") as c0, cluster.client("d1") as c1:
            a = c0.allocate(8, 60)
            b = c1.allocate(8, 60)
            c0.write(a[1], 0, b"aaaaaaaa")
            c1.write(b[1], 0, b"bbbbbbbb")
            cluster.inject_fault(FaultPlan(corrupt=[
                CorruptDirective("d0", lambda _: True, 0, 0xFF)]))
            assert c1.read(b[0], 0, 8) == b"bbbbbbbb"
            assert c0.read(a[0], 0, 8) != b"aaaaaaaa"


def test_inject_fault_unknown_node_rejected():
    with harness.spawn_cluster(1, seed=7) as cluster:
        with pytest.raises(EbpError) as err:
            cluster.inject_fault(FaultPlan(stop=["d9"]))
        assert err.value.code == E_UNKNOWN_NODE


def test_refuse_transfers_blocks_at_full_probability():
    with harness.spawn_cluster(2, seed=8) as cluster:
        cluster.inject_fault(FaultPlan(refuse_transfers=[
            RefuseTransfers("d1", probability=1.0, seed=1)]))
        with cluster.client("d0") as c0, cluster.client("d1") as c1:
            src = c0.allocate(16, 60)
            dst = c1.allocate(16, 60)
            c0.write(src[1], 0, b"payload")  # d0 writes unaffected
            with pytest.raises(EbpError) as err:
                c0.transfer(src[0], dst[1], 0, 0, 8)
            assert err.value.code == E_NET


def test_refuse_transfers_rate_is_seeded_and_reproducible():
    outcomes = []
    for _ in range(2):
        with harness.spawn_cluster(2, seed=9) as cluster:
            cluster.inject_fault(FaultPlan(refuse_transfers=[
                RefuseTransfers("d1", probability=0.5, seed=42)]))
            with cluster.client("d0") as c0, cluster.client("d1") as c1:
                src = c0.allocate(16, 600)
                dst = c1.allocate(16, 600)
                c0.write(src[1], 0, b"x" * 16)
                run = []
                for _ in range(20):
                    try:
                        c0.transfer(src[0], dst[1], 0, 0, 16)
                        run.append(True)
                    except EbpError:
                        run.append(False)
                outcomes.append(tuple(run))
    assert outcomes[0] == outcomes[1]
    assert True in outcomes[0] and False in outcomes[0]


def test_seeded_clusters_are_byte_deterministic():
    snapshots = []
    for _ in range(2):
        with harness.spawn_cluster(3, seed=31337) as cluster:
            directory = cluster.directory()
            policy = UploadPolicy(block_size=4096, replicas=2, lease_seconds=600)
            payload = bytes(range(256)) * 40
            doc = control.upload(payload, policy, directory)
            uris = tuple(sorted(m.caps["read"].split("/", 3)[-1]
                                for m in doc.mappings))
            snapshots.append((uris, control.download(doc, directory)))
    assert snapshots[0] == snapshots[1]
