"""
ComboLab
--------
ComboLoss (regression + weighted classification + expectation losses),
score discretization and squeeze-and-excitation blocks on a small
reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
