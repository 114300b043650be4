"""Exception hierarchy shared across the pipeline."""


class CdmilError(Exception):
    """Base class for every error raised by this package."""


class UserError(CdmilError):
    """Bad input from the caller: config, missing files, wrong stage order."""


class PipelineError(CdmilError):
    """A stage failed while running on valid input."""


# schema
class UnknownLabel(CdmilError, ValueError):
    def __init__(self, raw):
        super().__init__(f"unknown distortion label: {raw!r}")
        self.raw = raw


class EmptyDataset(UserError, ValueError):
    pass


# llm gateway
class TransportError(PipelineError):
    def __init__(self, status, message=""):
        super().__init__(f"transport error (status={status}) {message}".strip())
        self.status = status


class GatewayTimeout(PipelineError):
    pass


class AuthMissing(UserError):
    pass


class RetriesExhausted(PipelineError):
    def __init__(self, attempts, last_error):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class NoJsonFound(CdmilError, ValueError):
    pass


# prompt pipeline
class MalformedElbJson(PipelineError):
    pass


class MalformedInstanceJson(PipelineError):
    pass


# bags
class EmptyBag(PipelineError):
    def __init__(self, utterance_id):
        super().__init__(f"no valid instances for utterance {utterance_id!r}")
        self.utterance_id = utterance_id


# embeddings
class MissingEmbedding(PipelineError, KeyError):
    pass


class DimensionMismatch(PipelineError, ValueError):
    pass


class BagOverflow(PipelineError, ValueError):
    pass


# model
class ShapeMismatch(CdmilError, ValueError):
    pass


class NonFiniteActivation(PipelineError, FloatingPointError):
    pass


class DivergedLoss(PipelineError, FloatingPointError):
    pass


# metrics
class LengthMismatch(CdmilError, ValueError):
    pass


class TooFewRuns(CdmilError, ValueError):
    pass


# cli
class MissingUpstream(UserError):
    pass


class ConfigInvalid(UserError):
    pass
