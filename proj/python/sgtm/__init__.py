"""Selective gradient masking on a small decoder-only transformer.

    cfg = sgtm.Config.load("configs/smoke.json").with_undiscovered_rate(0.2)
    ex = sgtm.Experiment(cfg)
    run = ex.train()            # method from the config
    run.evaluate()              # ablated losses
    run.calibrate()["after"]
"""

from ._sgtm import (
    Config,
    ConfigError,
    ContractError,
    Experiment,
    IoError,
    Run,
    __version__,
    compute_penalty,
    fit_scaling,
    leakage,
    read_checkpoint,
)

__all__ = [
    "Config",
    "ConfigError",
    "ContractError",
    "Experiment",
    "IoError",
    "Run",
    "compute_penalty",
    "fit_scaling",
    "leakage",
    "read_checkpoint",
]
