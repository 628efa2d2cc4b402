from .descriptor import InvalidDescriptor, MecDescriptor, format_descriptor_lines, parse_descriptor_lines
from .server import (
    BufferState,
    FlushReport,
    HandoverDirective,
    HandoverState,
    MecServer,
    border_cells,
    evaluate_handover,
    format_query_payload,
    parse_query_payload,
)

__all__ = [
    "BufferState",
    "FlushReport",
    "HandoverDirective",
    "HandoverState",
    "InvalidDescriptor",
    "MecDescriptor",
    "MecServer",
    "border_cells",
    "evaluate_handover",
    "format_descriptor_lines",
    "format_query_payload",
    "parse_descriptor_lines",
    "parse_query_payload",
]
