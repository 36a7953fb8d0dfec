"""
Controllers package - one controller method per command-line subcommand.
"""

from .controller import MainController

__all__ = ['MainController']
