"""
Handlers package for the pipeline's CLI commands.
"""

from .commands import *
