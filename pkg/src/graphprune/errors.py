"""Exception types shared across the package."""


class GraphPruneError(Exception):
    """Base class for all module errors (CLI exit code 3)."""


# netmodel
class NonDagError(GraphPruneError):
    pass


class UnsupportedLayerError(GraphPruneError):
    pass


class MaskLengthError(GraphPruneError):
    pass


class PaddingOverflowError(GraphPruneError):
    pass


class EmptyLayerError(GraphPruneError):
    def __init__(self, layer_id: int):
        super().__init__(f"layer {layer_id} has every output unit pruned")
        self.layer_id = layer_id


class InvalidGroupCountError(GraphPruneError):
    pass


class FormatError(GraphPruneError):
    pass


# diffcore
class ShapeMismatchError(GraphPruneError):
    pass


class NonScalarLossError(GraphPruneError):
    pass


class RankError(GraphPruneError):
    pass


# env
class OracleUnavailableError(GraphPruneError):
    pass


class EpisodeFinishedError(GraphPruneError):
    pass


# ppo / gaepre
class IncompleteEpisodeError(GraphPruneError):
    pass


class NonFiniteLossError(GraphPruneError):
    def __init__(self, message: str, minibatch: int | None = None):
        super().__init__(message if minibatch is None else f"{message} (minibatch {minibatch})")
        self.minibatch = minibatch


class StaleRolloutError(GraphPruneError):
    pass


# evalnet
class EmptyDatasetError(GraphPruneError):
    pass


class DivergenceError(GraphPruneError):
    pass


class OracleProtocolError(GraphPruneError):
    """Raised by the external-oracle client (CLI exit code 4)."""

    def __init__(self, message: str, exit_code: int | None = None):
        super().__init__(message)
        self.exit_code = exit_code


# esbase
class CovarianceDegenerateError(GraphPruneError):
    pass


# cli
class ConfigError(GraphPruneError):
    """Bad or missing configuration value (CLI exit code 2)."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
