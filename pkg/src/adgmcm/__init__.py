"""Gaussian mixture copula models fitted by automatic differentiation."""

from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:
    __version__ = "unknown"
