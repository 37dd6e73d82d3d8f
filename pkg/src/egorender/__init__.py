"""Egocentric-to-free-viewpoint human rendering at desk scale.

Pipeline: a fisheye ego image is mapped to dense body correspondences,
unwrapped into a partial texture, combined with a learned implicit texture
stack, resampled at a target-view pose image, and translated to RGB by a
conditional generator.
"""
__version__ = "0.1.0"
