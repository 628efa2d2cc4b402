"""Topic names used between vehicles, MEC servers and the registry.

======================  ===============================================
CAM feed                ``<mec_id>/edm_feed/<cell>``
ITS query / response    ``<mec_id>/<its_app_id>/query|response/<vehicle_id>``
Vehicle login           ``<registry_id>/vehicle/login``
Vehicle login response  ``<registry_id>/login_response/<vehicle_id>``
Vehicle handover        ``<mec_id>/handover/<vehicle_id>``
MEC login               ``<registry_id>/mec/login``
MEC update              ``<registry_id>/update/<mec_id>``
Neighbour update        ``<registry_id>/neighbours/<mec_id>``
======================  ===============================================
"""

from __future__ import annotations

from .pubsub.topics import InvalidTopic, segment_ok

DEFAULT_REGISTRY_ID = "mec_registry"
FEED = "edm_feed"


def _seg(value) -> str:
    s = str(value)
    if not segment_ok(s):
        raise InvalidTopic(f"{s!r} cannot be used as a topic segment")
    return s


def feed_topic(mec_id: str, cell) -> str:
    return f"{_seg(mec_id)}/{FEED}/{_seg(cell)}"


def feed_filter(mec_id: str) -> str:
    return f"{_seg(mec_id)}/{FEED}/#"


def its_query_topic(mec_id: str, app_id: str, vehicle_id) -> str:
    return f"{_seg(mec_id)}/{_seg(app_id)}/query/{_seg(vehicle_id)}"


def its_response_topic(mec_id: str, app_id: str, vehicle_id) -> str:
    return f"{_seg(mec_id)}/{_seg(app_id)}/response/{_seg(vehicle_id)}"


def handover_topic(mec_id: str, vehicle_id) -> str:
    return f"{_seg(mec_id)}/handover/{_seg(vehicle_id)}"


def vehicle_login_topic(registry_id: str = DEFAULT_REGISTRY_ID) -> str:
    return f"{_seg(registry_id)}/vehicle/login"


def login_response_topic(registry_id: str, vehicle_id) -> str:
    return f"{_seg(registry_id)}/login_response/{_seg(vehicle_id)}"


def mec_login_topic(registry_id: str = DEFAULT_REGISTRY_ID) -> str:
    return f"{_seg(registry_id)}/mec/login"


def mec_update_topic(registry_id: str, mec_id: str) -> str:
    return f"{_seg(registry_id)}/update/{_seg(mec_id)}"


def neighbours_topic(registry_id: str, mec_id: str) -> str:
    return f"{_seg(registry_id)}/neighbours/{_seg(mec_id)}"


def parse_feed_topic(topic: str) -> tuple[str, str] | None:
    """``(mec_id, cell)`` for a CAM feed topic, else None."""
    parts = topic.split("/")
    if len(parts) != 3 or parts[1] != FEED or not parts[0] or not parts[2]:
        return None
    return parts[0], parts[2]


def parse_kv(payload: str) -> dict[str, str]:
    """Parse ``k=v;k=v`` payloads used by login responses and directives."""
    out = {}
    for item in payload.strip().split(";"):
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"malformed item {item!r}")
        out[key.strip()] = value.strip()
    return out
