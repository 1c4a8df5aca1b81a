"""Closed-track driving simulator and behavioral-cloning harness for studying
speed-induced task shift and label shifting against control-loop delay."""

__version__ = "0.1.0"
