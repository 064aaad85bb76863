"""Zeroth-order optimization with learned sampling policies.

Submodules: :mod:`numerics`, :mod:`objectives`, :mod:`estimator`,
:mod:`policies`, :mod:`updates`, :mod:`optimizer`, :mod:`nn`, :mod:`ddpg`
and the :mod:`harness` (CLI and experiment engine).
"""

__version__ = "0.1.0"
