"""Queue-based messaging backbone: embedded broker, wire codec, TCP server and client."""

from .broker import (
    DLQ_SUFFIX,
    Broker,
    BrokerError,
    InvalidQueueName,
    Message,
    PayloadTooLarge,
    QueueStats,
    Subscription,
    UnknownDelivery,
    UnknownQueue,
)
from .codec import MalformedFrame, TruncatedFrame, decode_frame, encode_frame
from .server import BrokerClient, BrokerServer

__all__ = [
    "DLQ_SUFFIX",
    "Broker",
    "BrokerClient",
    "BrokerError",
    "BrokerServer",
    "InvalidQueueName",
    "MalformedFrame",
    "Message",
    "PayloadTooLarge",
    "QueueStats",
    "Subscription",
    "TruncatedFrame",
    "UnknownDelivery",
    "UnknownQueue",
    "decode_frame",
    "encode_frame",
]
