"""
PerfectLES — Error Types
========================
Exception hierarchy shared by the solver, the closure pipeline, the network
engine and the command line.

Usage:
    from pl_errors import StateInvalidError
    raise StateInvalidError("negative pressure", element=(0, 1, 2), node=(3, 3, 0))
"""

from __future__ import annotations

from typing import Any, Dict, Optional, Tuple


class PerfectLESError(Exception):
    """Base class for all testbed failures."""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.details: Dict[str, Any] = {k: v for k, v in details.items() if v is not None}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.details:
            return base
        info = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{base} ({info})"


class ConfigurationError(PerfectLESError, ValueError):
    """Invalid parameters, incompatible meshes, cadence mismatches, storage caps."""
    pass


class ConvergenceError(PerfectLESError):
    """Root iteration or adaptive quadrature failed to converge."""
    pass


class StateInvalidError(PerfectLESError):
    """Non-physical state: density or pressure not positive."""

    def __init__(
        self,
        message: str,
        element: Optional[Tuple[int, ...]] = None,
        node: Optional[Tuple[int, ...]] = None,
        **details: Any,
    ):
        super().__init__(message, element=element, node=node, **details)
        self.element = element
        self.node = node


class RunAbortedError(PerfectLESError):
    """NaN/Inf detected during time integration or training."""
    pass


class ShapeError(PerfectLESError, ValueError):
    pass


class FormatError(PerfectLESError):
    """Bad magic, version, checksum or payload length in a binary file."""
    pass
