"""Minimal MQTT 3.1.1 stack: codec, client, and embedded broker.

Covers exactly what the stream transports need — QoS 0/1, retained
messages, last-will, wildcards, keepalive, reconnect — so deployments can
run fully self-contained, while the client stays interoperable with any
standard 3.1.1 broker.  QoS 2 is rejected cleanly.
"""

from .broker import MqttBroker
from .client import InboundMessage, MqttClient, MqttConnectionError, Will
from .packets import MqttProtocolError, decode_packet, encode_packet
from .topics import TopicError, topic_matches, validate_filter, validate_topic

__all__ = [
    "InboundMessage",
    "MqttBroker",
    "MqttClient",
    "MqttConnectionError",
    "MqttProtocolError",
    "TopicError",
    "Will",
    "decode_packet",
    "encode_packet",
    "topic_matches",
    "validate_filter",
    "validate_topic",
]
