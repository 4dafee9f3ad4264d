"""Averaging of a reflected slow-fast diffusion onto a star graph.

Modules: :mod:`~graphlimit.model` (coefficient fields), :mod:`~graphlimit.graph`
(graph and averaged coefficients), :mod:`~graphlimit.sde` (path simulation),
:mod:`~graphlimit.process` (Markov chain on the graph), :mod:`~graphlimit.bvp`
(limiting boundary-value problem) and :mod:`~graphlimit.harness` (CLI runner).
"""

__version__ = "0.1.0"
