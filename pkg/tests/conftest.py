import pytest

from tensorgrid.launcher import free_ports
from tensorgrid.routing import plan_topology
from tensorgrid.server import ShardServer


class LocalCluster:
    """In-process cluster: real sockets, shard servers on threads."""

    def __init__(self, n_shards: int, workers: int = 1):
        ports = free_ports(n_shards)
        self.topology = plan_topology(n_shards, [f"127.0.0.1:{p}" for p in ports])
        self.servers = [
            ShardServer(shard.address, shard.shard_id, self.topology, workers=workers)
            for shard in self.topology.shards
        ]
        for server in self.servers:
            server.start()

    @property
    def seed_address(self) -> str:
        return self.topology.shards[0].address

    def server(self, shard_id: int) -> ShardServer:
        return self.servers[shard_id]

    def stop(self) -> None:
        for server in self.servers:
            server.stop()


@pytest.fixture
def cluster1():
    c = LocalCluster(1)
    yield c
    c.stop()


@pytest.fixture
def cluster2():
    c = LocalCluster(2)
    yield c
    c.stop()


@pytest.fixture
def cluster4():
    c = LocalCluster(4)
    yield c
    c.stop()
