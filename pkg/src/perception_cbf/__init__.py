"""Perception-aware neural control barrier function synthesis.

Learns a barrier ``h`` and controller ``pi`` that stay safe when the
controller only sees the output of an imperfect perception function, using a
heteroscedastic GP of the perception error to build confidence ellipsoids
around the perceived state.
"""

__version__ = "0.1.0"
