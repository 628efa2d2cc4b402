"""Network runtime around :class:`MecServer`: broker, registry link, border mirroring."""

from __future__ import annotations

import asyncio
import concurrent.futures
import logging
import time
from dataclasses import dataclass, field

from ..geoindex import CellId
from ..pubsub import Broker, BrokerClient, BrokerError, BrokerServer, split_endpoint
from ..topics import (
    DEFAULT_REGISTRY_ID,
    feed_filter,
    feed_topic,
    mec_login_topic,
    mec_update_topic,
    neighbours_topic,
)
from .descriptor import MecDescriptor, format_descriptor_lines, parse_descriptor_lines
from .server import MecServer

log = logging.getLogger(__name__)


class RegistryUnreachable(ConnectionError):
    pass


@dataclass
class NeighborLink:
    """Our client session on a neighbor's broker, subscribed to border cells."""

    descriptor: MecDescriptor
    client: BrokerClient | None = None
    cells: set[CellId] = field(default_factory=set)


def now_ms() -> int:
    return int(time.time() * 1000)


class MecNode:
    """Runs one MEC server: its broker, flush and prune schedules, and peers.

    ``flush_in_thread`` hands decode+insert to a single worker thread (the
    sole store writer) so the event loop keeps accepting frames while a
    flush runs.
    """

    def __init__(
        self,
        server: MecServer,
        listen: str | None = None,
        registry_endpoint: str | None = None,
        registry_id: str = DEFAULT_REGISTRY_ID,
        flush_in_thread: bool = True,
        retry_initial_s: float = 0.2,
        retry_max_s: float = 5.0,
    ):
        self.server = server
        self.listen = listen or server.descriptor.broker_endpoint
        self.registry_endpoint = registry_endpoint
        self.registry_id = registry_id
        self.flush_in_thread = flush_in_thread
        self.retry_initial_s = retry_initial_s
        self.retry_max_s = retry_max_s
        self.broker = Broker(name=server.mec_id)
        self.broker_server: BrokerServer | None = None
        self.links: dict[str, NeighborLink] = {}
        self.registry_client: BrokerClient | None = None
        self.registry_failures = 0
        self.flush_reports: int = 0
        self.neighbor_updates = 0
        self._executor = concurrent.futures.ThreadPoolExecutor(1, thread_name_prefix=f"flush-{server.mec_id}")
        self._tasks: list[asyncio.Task] = []
        self._loop: asyncio.AbstractEventLoop | None = None
        self._link_lock = asyncio.Lock()
        self._stopping = False
        self._neighbors_seen = asyncio.Event()

    @property
    def mec_id(self) -> str:
        return self.server.mec_id

    # -- lifecycle ------------------------------------------------------------------

    async def start(self) -> "MecNode":
        self._loop = asyncio.get_running_loop()
        host, port = split_endpoint(self.listen)
        self.broker_server = await BrokerServer(self.broker, host, port).start()
        if port == 0 or self.server.descriptor.broker_endpoint != self.broker_server.endpoint:
            self.server.set_descriptor(_replace_endpoint(self.server.descriptor, self.broker_server.endpoint))
        self.server.publish = self._publish_threadsafe
        feed = self.broker.attach_internal(f"{self.mec_id}-edm", self._on_feed)
        self.broker.subscribe(feed, feed_filter(self.mec_id))
        its = self.broker.attach_internal(f"{self.mec_id}-its", self._on_query)
        self.broker.subscribe(its, f"{self.mec_id}/+/query/+")
        self._tasks.append(asyncio.create_task(self._flush_loop()))
        self._tasks.append(asyncio.create_task(self._prune_loop()))
        if self.registry_endpoint:
            self._tasks.append(asyncio.create_task(self._registry_loop()))
        return self

    @property
    def endpoint(self) -> str:
        return self.broker_server.endpoint

    async def stop(self) -> None:
        self._stopping = True
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self._tasks.clear()
        for link in list(self.links.values()):
            if link.client is not None:
                await link.client.close()
        self.links.clear()
        if self.registry_client is not None:
            await self.registry_client.close()
        # drain what is still buffered so nothing accepted is lost
        await self._run_writer(self.server.flush_buffer, now_ms())
        if self.broker_server is not None:
            await self.broker_server.stop()
        self._executor.shutdown(wait=True)

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()

    # -- broker callbacks (event loop thread) -----------------------------------------

    def _publish_threadsafe(self, topic: str, payload: bytes) -> None:
        self._loop.call_soon_threadsafe(self.broker.publish, topic, payload)

    def _on_feed(self, topic: str, payload: bytes) -> None:
        self.server.ingest_cam(payload, topic, time.time() * 1000)

    def _on_query(self, topic: str, payload: bytes) -> None:
        self.server.answer_query(topic, payload, now_ms())

    # -- writer schedules ---------------------------------------------------------------

    async def _run_writer(self, fn, *args):
        if self.flush_in_thread:
            return await self._loop.run_in_executor(self._executor, fn, *args)
        return fn(*args)

    async def _flush_loop(self) -> None:
        period = self.server.t_buffer_ms / 1000.0
        loop = self._loop
        deadline = loop.time() + period
        while True:
            await asyncio.sleep(max(0.0, deadline - loop.time()))
            await self._run_writer(self.server.flush_buffer, now_ms())
            self.flush_reports += 1
            deadline += period
            # an overrun delays the next flush instead of stacking flushes
            if deadline < loop.time():
                deadline = loop.time()

    async def _prune_loop(self) -> None:
        period = self.server.retention.prune_interval_ms / 1000.0
        while True:
            await asyncio.sleep(period)
            await self._run_writer(self.server.prune, now_ms())

    # -- registry link ----------------------------------------------------------------------

    async def _registry_loop(self) -> None:
        delay = self.retry_initial_s
        while not self._stopping:
            try:
                client = await BrokerClient.connect(
                    self.registry_endpoint, f"mec-{self.mec_id}", on_message=self._on_registry_message
                )
            except (OSError, asyncio.TimeoutError, BrokerError) as exc:
                self.registry_failures += 1
                log.warning("%s: registry %s unreachable (%s); retrying in %.1fs", self.mec_id, self.registry_endpoint, exc, delay)
                await asyncio.sleep(delay)
                delay = min(delay * 2, self.retry_max_s)
                continue
            delay = self.retry_initial_s
            self.registry_client = client
            try:
                await client.subscribe(neighbours_topic(self.registry_id, self.mec_id))
                client.publish(mec_login_topic(self.registry_id), format_descriptor_lines([self.server.descriptor]))
                await client.wait_closed()
            except BrokerError as exc:
                log.warning("%s: registry link lost: %s", self.mec_id, exc)
            self.registry_client = None
            if not self._stopping:
                await asyncio.sleep(delay)

    def _on_registry_message(self, topic: str, payload: bytes) -> None:
        if topic != neighbours_topic(self.registry_id, self.mec_id):
            return
        try:
            neighbors = parse_descriptor_lines(payload)
        except ValueError as exc:
            log.warning("%s: bad neighbour update: %s", self.mec_id, exc)
            return
        self.neighbor_updates += 1
        border = self.server.set_neighbors(neighbors)
        log.info("%s: neighbours now %s", self.mec_id, sorted(border))
        self._tasks.append(asyncio.create_task(self._sync_links(neighbors, border)))

    async def publish_update(self, descriptor: MecDescriptor) -> None:
        """Adopt a changed descriptor and announce it on the MEC Update topic."""
        self.server.set_descriptor(descriptor)
        if self.registry_client is None:
            raise RegistryUnreachable("not connected to the registry")
        self.registry_client.publish(
            mec_update_topic(self.registry_id, self.mec_id), format_descriptor_lines([self.server.descriptor])
        )
        await self.registry_client.ping()

    # -- border mirroring ----------------------------------------------------------------------

    def _on_mirror(self, topic: str, payload: bytes) -> None:
        self.server.ingest_cam(payload, topic, time.time() * 1000)

    async def _sync_links(self, neighbors: list[MecDescriptor], border: dict[str, set[CellId]]) -> None:
        async with self._link_lock:
            wanted = {n.mec_id: n for n in neighbors if border.get(n.mec_id)}
            for mec_id in list(self.links):
                link = self.links[mec_id]
                if mec_id not in wanted or wanted[mec_id].broker_endpoint != link.descriptor.broker_endpoint:
                    if link.client is not None:
                        await link.client.close()
                    del self.links[mec_id]
            for mec_id, n in wanted.items():
                link = self.links.get(mec_id)
                if link is None:
                    try:
                        client = await BrokerClient.connect(
                            n.broker_endpoint, f"{self.mec_id}-mirror", on_message=self._on_mirror
                        )
                    except (OSError, asyncio.TimeoutError, BrokerError) as exc:
                        log.warning("%s: cannot reach neighbour %s at %s: %s", self.mec_id, mec_id, n.broker_endpoint, exc)
                        continue
                    link = self.links[mec_id] = NeighborLink(n, client)
                link.descriptor = n
                cells = border[mec_id]
                for c in sorted(link.cells - cells, key=lambda c: c.encoded):
                    await link.client.unsubscribe(feed_topic(mec_id, c))
                for c in sorted(cells - link.cells, key=lambda c: c.encoded):
                    await link.client.subscribe(feed_topic(mec_id, c))
                link.cells = set(cells)
            self._neighbors_seen.set()

    def border_subscriptions(self) -> dict[str, set[CellId]]:
        return {k: set(v.cells) for k, v in self.links.items()}


def _replace_endpoint(d: MecDescriptor, endpoint: str) -> MecDescriptor:
    from dataclasses import replace

    return replace(d, broker_endpoint=endpoint)
