"""
A desk-scale simulator for unified sequence parallel attention.
"""

__version__ = "0.1.0"

from uspsim.server import create_app
