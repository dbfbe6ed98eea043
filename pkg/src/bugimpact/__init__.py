"""Estimate the practical impact of compiler miscompilation bugs on a corpus
of real packages by building each package with a buggy and a fixed compiler
and comparing the results."""

__version__ = "0.1.0"
