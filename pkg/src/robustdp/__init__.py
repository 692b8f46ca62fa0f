"""Robust finite-horizon stochastic control: exact and neural max-min solvers
under Wasserstein and parametric model uncertainty, with a data-driven
hedging application and value-gap bound calculators."""

__version__ = "0.1.0"
