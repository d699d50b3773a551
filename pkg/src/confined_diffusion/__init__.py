"""Generative modelling on bounded domains with boundary-respecting diffusions."""

from .geometry import Ball, Box, Domain, GeometryError, domain_from_dict, fold_box, specular_reflect
from .noise import NoiseSource

__version__ = "0.1.0"

__all__ = ["Ball", "Box", "Domain", "GeometryError", "NoiseSource", "domain_from_dict", "fold_box",
           "specular_reflect", "__version__"]
