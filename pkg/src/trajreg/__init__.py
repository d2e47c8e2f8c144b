"""Trajectory-guided deformable registration of brain-like volumes.

Modules: ``volume`` (grids and file IO), ``field`` (displacement algebra),
``mesh`` (surfaces), ``demons`` (diffeomorphic demons), ``msnet``
(simplification network), ``pipeline`` (pairs, trajectories, guided
registration), ``metrics``, ``phantom`` and the ``cli``.
"""
__version__ = "0.1.0"

from .errors import TrajregError  # noqa: E402

__all__ = ["TrajregError", "__version__"]
