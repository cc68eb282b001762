"""Topic names and subscription filters (MQTT 3.1.1 section 4.7 semantics).

``+`` matches exactly one level, ``#`` (terminal only) matches the rest of
the name including its parent level.  Topics may start with ``/`` (an empty
leading level, e.g. ``/objdetect/mobilev3``); other empty levels are
rejected to keep names unambiguous.
"""

from __future__ import annotations


class TopicError(ValueError):
    pass


def _check_levels(name: str, what: str) -> list[str]:
    if not name:
        raise TopicError(f"empty {what}")
    if len(name) > 65535:
        raise TopicError(f"{what} longer than 65535 bytes")
    levels = name.split("/")
    for i, level in enumerate(levels):
        if level == "" and i > 0:
            raise TopicError(f"{what} {name!r} has an empty level")
    return levels


def validate_topic(topic: str) -> None:
    """A publishable topic name: non-empty levels, no wildcards."""
    levels = _check_levels(topic, "topic")
    for level in levels:
        if "+" in level or "#" in level:
            raise TopicError(f"topic {topic!r} contains wildcard characters")


def validate_filter(filt: str) -> None:
    """A subscription filter: ``+`` alone in a level, ``#`` only terminal."""
    levels = _check_levels(filt, "filter")
    for i, level in enumerate(levels):
        if level == "#":
            if i != len(levels) - 1:
                raise TopicError(f"filter {filt!r}: '#' must be the last level")
        elif "#" in level:
            raise TopicError(f"filter {filt!r}: '#' must stand alone in its level")
        elif "+" in level and level != "+":
            raise TopicError(f"filter {filt!r}: '+' must stand alone in its level")


def topic_matches(filt: str, topic: str) -> bool:
    """Does a subscription filter match a concrete topic name?"""
    fparts = filt.split("/")
    tparts = topic.split("/")
    for i, fp in enumerate(fparts):
        if fp == "#":
            return True
        if i >= len(tparts):
            return False
        if fp != "+" and fp != tparts[i]:
            return False
    return len(fparts) == len(tparts)


def has_wildcards(s: str) -> bool:
    return "+" in s or "#" in s
