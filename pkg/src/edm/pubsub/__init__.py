from .broker import Broker, BrokerServer, Effect, InternalSession, ProtocolViolation, RecordingSession, Session
from .client import BrokerClient, BrokerError, split_endpoint
from .topics import InvalidTopic, topic_matches, validate_filter, validate_topic
from .wire import MAX_PAYLOAD, Frame, FrameError, FrameReader, Kind, PayloadTooLarge, decode_body, encode_frame

__all__ = [
    "Broker",
    "BrokerClient",
    "BrokerError",
    "BrokerServer",
    "Effect",
    "Frame",
    "FrameError",
    "FrameReader",
    "InternalSession",
    "InvalidTopic",
    "Kind",
    "MAX_PAYLOAD",
    "PayloadTooLarge",
    "ProtocolViolation",
    "RecordingSession",
    "Session",
    "decode_body",
    "encode_frame",
    "split_endpoint",
    "topic_matches",
    "validate_filter",
    "validate_topic",
]
