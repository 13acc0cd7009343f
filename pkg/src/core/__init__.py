"""
recollide core

Geometry, bounce simulation, samplers, estimators and the coupled gas processes.
"""

__version__ = "0.3.0"
