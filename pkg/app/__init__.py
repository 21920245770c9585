"""
spatialfusion: geometry-conditioned diffusion on desk-scale synthetic scenes.
"""

__version__ = '0.1.0'
