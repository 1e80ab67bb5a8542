"""Distilling a beam-search FCS-MPC expert into a neural switching policy for a
flying-capacitor three-level boost converter."""

__version__ = "0.1.0"

from fcdistill._backend import available as available_backends, kernels  # noqa: E402
from fcdistill.converter import (  # noqa: E402
    BOOST,
    NOMINAL,
    ConverterParams,
    DivergenceError,
    Exogenous,
    PlantState,
    SwitchMode,
    discrete_step,
)
from fcdistill.mpc import MpcConfig, MpcExpert  # noqa: E402

__all__ = [
    "BOOST", "NOMINAL", "ConverterParams", "DivergenceError", "Exogenous", "PlantState",
    "SwitchMode", "discrete_step", "MpcConfig", "MpcExpert", "available_backends", "kernels",
]
