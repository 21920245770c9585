"""
Utility functions and helper modules.
"""

from .console import console, err_console, get_logger, set_verbosity
from .imageio import export_depth, export_image, export_mask, read_depth, read_pgm, read_ppm

__all__ = [
    'console',
    'err_console',
    'get_logger',
    'set_verbosity',
    'export_depth',
    'export_image',
    'export_mask',
    'read_depth',
    'read_pgm',
    'read_ppm',
]
