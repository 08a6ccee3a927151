import logging
import os
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_configured = False


def get_logger(name):
    """Named logger writing to stderr; level comes from AUDIT_LOG_LEVEL."""
    global _configured
    if not _configured:
        level = os.getenv("AUDIT_LOG_LEVEL", "INFO").upper()
        logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
        # urllib3 logs every retry at WARNING; the client logs its own
        logging.getLogger("urllib3").setLevel(logging.ERROR)
        _configured = True
    return logging.getLogger(name)
