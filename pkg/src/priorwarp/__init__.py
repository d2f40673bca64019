"""Spatiotemporal volume modelling with a prior-embedded reference network and a
diffeomorphic deformation network."""

__version__ = "0.1.0"
