"""Sensor ingestion: MQTT-subset endpoint, raw sample store, raw-data HTTP API."""

from .mqtt import MqttPacket, decode_mqtt, encode_mqtt
from .rawstore import (
    BadPayload,
    BadTopic,
    IngestError,
    RateMismatch,
    RawStore,
    SampleBatch,
    UnknownDevice,
    parse_publish,
)
from .service import (
    DOWNLOAD_QUEUE,
    BrokerUnreachable,
    CycleNotification,
    IngestHttpServer,
    MqttServer,
    handle_publish,
    notify_cycle,
)

__all__ = [
    "DOWNLOAD_QUEUE",
    "BadPayload",
    "BadTopic",
    "BrokerUnreachable",
    "CycleNotification",
    "IngestError",
    "IngestHttpServer",
    "MqttPacket",
    "MqttServer",
    "RateMismatch",
    "RawStore",
    "SampleBatch",
    "UnknownDevice",
    "decode_mqtt",
    "encode_mqtt",
    "handle_publish",
    "notify_cycle",
    "parse_publish",
]
