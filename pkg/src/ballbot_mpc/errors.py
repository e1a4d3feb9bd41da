"""Exception types shared across the package."""


class BallbotError(Exception):
    """Base class for errors raised by this package."""


class ScenarioError(BallbotError):
    """A scenario file is malformed or fails validation."""


class WorkspaceLimitError(BallbotError):
    """A state left the controllable workspace (e.g. lean near gimbal lock)."""


class SimDivergedError(BallbotError):
    """The simulated state became non-finite or physically meaningless."""


class MissingLogError(BallbotError):
    """A metrics or comparison routine was asked for records the log lacks."""
