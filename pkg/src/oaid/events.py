"""Line-delimited JSON progress events, routed through :mod:`logging`."""
from __future__ import annotations

import json
import logging
import time

logger = logging.getLogger("oaid.events")


def emit(event: str, **fields) -> None:
    if logger.isEnabledFor(logging.INFO):
        logger.info(json.dumps({"event": event, **fields}, default=float))


class JsonLineFormatter(logging.Formatter):
    """Messages from :func:`emit` pass through with a timestamp added; others get wrapped."""

    def format(self, record):
        try:
            payload = json.loads(record.getMessage())
            if not isinstance(payload, dict):
                raise ValueError
        except ValueError:
            payload = {"event": "log", "level": record.levelname, "logger": record.name,
                       "message": record.getMessage()}
        payload["time"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created))
        return json.dumps(payload, default=str)
