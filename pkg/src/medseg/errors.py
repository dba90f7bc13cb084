"""Exception types shared across the package."""


class MedsegError(Exception):
    """Base class for all package-specific errors."""


class MalformedMarkup(MedsegError):
    """Grounded-text markup cannot be parsed in strict mode."""


class ShapeError(MedsegError):
    """Tensor or grid dimensions violate an interface contract."""


class SequenceTooLong(MedsegError):
    """Token sequence exceeds the model's maximum length."""


class GenerationBudgetExceeded(MedsegError):
    """Decoding hit its token budget before emitting EOS."""


class LayoutInfeasible(MedsegError):
    """Lesion placement failed after the attempt bound."""


class UnknownStyle(MedsegError):
    """Conversation style is not one of the supported kinds."""


class IdOutOfRange(MedsegError):
    """Token id falls outside the vocabulary."""


class NonFiniteLoss(MedsegError):
    """Training loss became NaN or infinite."""


class EmptyEvalSet(MedsegError):
    """Evaluation was requested on an empty collection."""


class AnnotatorUnavailable(MedsegError):
    """Annotation backend failed after all retries."""


class ReviewerUnavailable(MedsegError):
    """Review backend cannot currently produce verdicts."""


class CheckpointError(MedsegError):
    """Checkpoint file is missing, corrupt, or has an unknown format tag."""
