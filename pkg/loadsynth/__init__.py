"""
Synthetic household load profiles - training, generation and serving
"""

__version__ = "1.0.0"
