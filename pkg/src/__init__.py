"""
Nonlinear Quadrature Sim - simulator and detector-tomography toolkit for
the feedforward measurement of p + gamma x^2

The version string lives in version.py.
"""

__author__ = "Nonlinear Quadrature Sim"
