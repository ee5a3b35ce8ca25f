"""Exception types shared across the toolkit."""


class HistotripletError(Exception):
    """Base class for all toolkit errors."""


class ManifestParseError(HistotripletError):
    """A line-delimited manifest failed to parse."""

    def __init__(self, path, line_number, reason):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}:{line_number}: {reason}")


class RecordValidationError(HistotripletError):
    """A record violates a domain invariant."""


class UnsupportedResolutionError(HistotripletError):
    """Requested magnification exceeds the slide's base magnification."""


class PatchReadError(HistotripletError):
    """Reading slide pixels failed."""

    def __init__(self, slide_id, x0, y0, width, height, reason):
        self.slide_id = slide_id
        self.region = (x0, y0, width, height)
        super().__init__(
            f"failed to read slide {slide_id!r} region "
            f"({x0},{y0})+({width}x{height}): {reason}"
        )


class SamplerExhaustionError(HistotripletError):
    """Rejection sampling ran out of candidates."""

    def __init__(self, distant_type, attempts, detail=""):
        self.distant_type = distant_type
        self.attempts = attempts
        msg = f"no candidate for {distant_type} after {attempts} attempts"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(HistotripletError):
    """An operation was called with arguments violating its contract."""


class DataError(HistotripletError):
    """A manifest reference could not be resolved to pixels."""


class CheckpointError(HistotripletError):
    """Checkpoint file is corrupt or incompatible."""


class NonFiniteLossError(HistotripletError):
    """Training produced a non-finite loss."""


class PipelineError(HistotripletError):
    """Pipeline orchestration failure (missing/stale artifacts, lock held)."""


class ConfigError(HistotripletError):
    """Run configuration is invalid; carries all violations at once."""

    def __init__(self, violations):
        # violations: list of (path-in-config, message)
        self.violations = list(violations)
        lines = "; ".join(f"{p}: {m}" for p, m in self.violations)
        super().__init__(f"invalid configuration: {lines}")
