"""Exception hierarchy; the CLI maps ConfigError to exit code 2, the rest to 1."""


class JointMTLError(Exception):
    pass


class ConfigError(JointMTLError, ValueError):
    """Invalid configuration, unknown names, bad CLI usage."""


class InputError(JointMTLError, ValueError):
    """Malformed model input (empty bag, wrong width)."""


class FormatError(JointMTLError, ValueError):
    """Malformed binary or text file; ``offset`` is the byte position, if known."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = "" if offset is None else f" (byte offset {offset})"
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}{where}")
        self.offset = offset
        self.path = path


class CohortError(JointMTLError, ValueError):
    """Inconsistent cohort: duplicates, missing labels, empty joins."""


class SplitError(JointMTLError, ValueError):
    """Cross-validation split impossible for the given labels."""


class MetricError(JointMTLError, ValueError):
    pass
