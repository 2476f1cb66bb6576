from __future__ import annotations

import threading

import pytest
import requests

from cloudbus import ComponentId, ComponentKind, GatewayServer, ManagementService
from cloudbus.topology import EdgeKind, InventoryNode, Topology


def component(cid: str, kind: str = "vm") -> ComponentId:
    return ComponentId(cid, ComponentKind(kind))


def chain_topology() -> Topology:
    """host-1 hosts vm-1 hosts svc-1."""
    topo = Topology()
    topo.upsert_node(InventoryNode(component("host-1", "physical_host")))
    topo.upsert_node(InventoryNode(component("vm-1", "vm")))
    topo.upsert_node(InventoryNode(component("svc-1", "service")))
    topo.link("host-1", "vm-1", EdgeKind.HOSTS)
    topo.link("vm-1", "svc-1", EdgeKind.HOSTS)
    return topo


@pytest.fixture
def gateway():
    """Started gateway on an ephemeral port plus its service; torn down after."""
    service = ManagementService(topology=chain_topology())
    server = GatewayServer(("127.0.0.1", 0), service, heartbeat_ms=100)
    thread = server.serve_background()
    try:
        yield server, service
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=2)


def bearer(token) -> dict[str, str]:
    value = token.token if hasattr(token, "token") else token
    return {"Authorization": f"Bearer {value}"}


def get(server: GatewayServer, path: str, token, **kwargs) -> requests.Response:
    return requests.get(f"{server.url}{path}", headers=bearer(token), timeout=10, **kwargs)


def post(server: GatewayServer, path: str, token, data=None, **kwargs) -> requests.Response:
    return requests.post(f"{server.url}{path}", headers=bearer(token), data=data, timeout=10, **kwargs)


class StreamReader:
    """Collects NDJSON lines from an event stream on a background thread."""

    def __init__(self, server: GatewayServer, token, params=None):
        self.lines: list[str] = []
        self.heartbeats = 0
        self._resp = requests.get(
            f"{server.url}/v1/events/stream",
            headers=bearer(token),
            params=params or {},
            stream=True,
            timeout=(5, 30),
        )
        assert self._resp.status_code == 200, self._resp.text
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self) -> None:
        try:
            for line in self._resp.iter_lines():
                if line is None:
                    continue
                text = line.decode("utf-8") if isinstance(line, bytes) else line
                if not text:
                    continue
                if text.startswith("#"):
                    self.heartbeats += 1
                else:
                    self.lines.append(text)
        except Exception:
            pass

    def wait_for(self, n: int, timeout: float = 5.0) -> list[str]:
        import time

        deadline = time.monotonic() + timeout
        while len(self.lines) < n and time.monotonic() < deadline:
            time.sleep(0.01)
        return list(self.lines)

    def close(self) -> None:
        self._resp.close()
