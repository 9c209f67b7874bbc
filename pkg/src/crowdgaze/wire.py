"""JSON wire protocol between the pipeline service and its clients.

Every message is a single JSON document with a ``type`` field. Unknown
types are ignored with a logged warning rather than killing the
connection.

Server to client: ``state``, ``fit_report``, ``click_ack``, ``error``.
Client to server: ``click``, ``fit``, ``config``, ``save_calibration``,
``start_recording``, ``stop_recording``.
"""
from __future__ import annotations

import json
import logging

log = logging.getLogger(__name__)

SERVER_TYPES = ("state", "fit_report", "click_ack", "error")
CLIENT_TYPES = ("click", "fit", "config", "save_calibration",
                "start_recording", "stop_recording")


class ProtocolError(ValueError):
    pass


def encode(msg: dict) -> str:
    if "type" not in msg:
        raise ProtocolError("message must carry a 'type' field")
    return json.dumps(msg, separators=(",", ":"))


def decode(text: str) -> dict | None:
    """Parsed message or None for unknown/garbled input (logged, not raised)."""
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as e:
        log.warning("undecodable wire message: %s", e)
        return None
    if not isinstance(msg, dict) or "type" not in msg:
        log.warning("wire message without a type field ignored")
        return None
    if msg["type"] not in SERVER_TYPES + CLIENT_TYPES:
        log.warning("unknown wire message type %r ignored", msg["type"])
        return None
    return msg


def state_message(state_jsonable: dict) -> dict:
    return {"type": "state", **state_jsonable}


def fit_report_message(reports: list[dict]) -> dict:
    return {"type": "fit_report", "reports": reports}


def click_ack_message(result: dict) -> dict:
    return {"type": "click_ack", **result}


def error_message(text: str) -> dict:
    return {"type": "error", "message": text}


def validate_click(msg: dict) -> tuple[float, float, float]:
    try:
        u, v, ts = float(msg["u"]), float(msg["v"]), float(msg["ts"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"malformed click: {e}")
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ProtocolError(f"click ({u}, {v}) outside the unit square")
    return u, v, ts
