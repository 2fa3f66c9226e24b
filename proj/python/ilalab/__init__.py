"""Intermediate-level transfer attacks: models, attacks, guide regression and refinement."""

from ._core import (
    ConfigError,
    DegenerateError,
    DirectionalGuide,
    DiscrepancyDataset,
    Error,
    Model,
    SplitModel,
    Trajectory,
    __version__,
    build_dataset,
    discrepancy_magnitude,
    fit_elasticnet,
    fit_rr,
    fit_rr_approx,
    fit_rr_woodbury,
    fit_svr,
    ifgsm,
    ila_guide,
    linbp,
    pearson,
    pgd,
    refine,
    run_campaign,
    synthetic_dataset,
    zoo_architectures,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
