class AuditError(Exception):
    """Base class for every failure the audit toolkit raises on purpose."""


class DatasetError(AuditError):
    def __init__(self, message, path=None, line=None, field=None, item_id=None):
        self.path = path
        self.line = line
        self.field = field
        self.item_id = item_id

        where = []
        if path is not None:
            where.append(f"{path}:{line}" if line is not None else str(path))
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class ConfigError(AuditError):
    pass


class EndpointError(AuditError):
    def __init__(self, message, instance_id=None, attempts=None):
        self.instance_id = instance_id
        self.attempts = attempts
        if instance_id is not None:
            message = f"{message} (instance {instance_id})"
        super().__init__(message)


class EndpointTimeout(EndpointError):
    pass


class EndpointHTTPError(EndpointError):
    def __init__(self, status, message, instance_id=None, attempts=None):
        self.status = status
        super().__init__(f"HTTP {status}: {message}", instance_id, attempts)


class MalformedResponse(EndpointError):
    pass


class CapabilityError(AuditError):
    """The endpoint cannot provide what was asked (scoring, distribution moments)."""


class MetricError(AuditError):
    pass


class SkipInstance(AuditError):
    def __init__(self, reason, item_id=None):
        self.reason = reason
        self.item_id = item_id
        super().__init__(reason if item_id is None else f"{item_id}: {reason}")
