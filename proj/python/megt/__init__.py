"""Python bindings for the megt dual-resolution MIL library."""

from ._megt import (  # noqa: F401
    Bag,
    ConfigError,
    ContractError,
    DataError,
    Error,
    Model,
    NumericError,
    ShapeError,
    attention,
    auc,
    confusion_metrics,
    pinv,
    read_bag,
    run_cli,
    synthesize,
    write_bag,
)
