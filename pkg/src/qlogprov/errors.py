"""Exception hierarchy shared across the extraction pipeline."""


class ProvenanceError(Exception):
    """Base class for all errors raised by qlogprov."""


class MalformedRecord(ProvenanceError):
    """A log line could not be decoded into an event."""

    def __init__(self, message, *, source=None, line_no=None):
        self.source = source
        self.line_no = line_no
        where = ""
        if source is not None:
            where = f"{source}:{line_no}: " if line_no is not None else f"{source}: "
        super().__init__(where + message)


class InvariantViolation(ProvenanceError):
    """An event decoded fine but breaks one or more record invariants."""

    def __init__(self, clauses):
        self.clauses = list(clauses)
        super().__init__("; ".join(self.clauses))


class SourceUnavailable(ProvenanceError):
    pass


class MalformedActivity(ProvenanceError):
    """Events of one activity cannot be assembled into a QQTree."""

    def __init__(self, activity_id, reason):
        self.activity_id = activity_id
        self.reason = reason
        super().__init__(f"activity {activity_id!r}: {reason}")


class CorruptCheckpoint(ProvenanceError):
    pass


class TypeConflict(ProvenanceError):
    pass


class IncompleteNode(ProvenanceError):
    pass


class UnsupportedSyntax(ProvenanceError):
    pass


class MissingNode(ProvenanceError):
    pass


class UnknownPoint(ProvenanceError):
    pass


class ValidationFailure(ProvenanceError):
    pass


class SinkUnavailable(ProvenanceError):
    def __init__(self, message, *, batch_id=None, attempts=0):
        self.batch_id = batch_id
        self.attempts = attempts
        super().__init__(message)


class ConfigError(ProvenanceError):
    pass
