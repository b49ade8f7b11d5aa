"""Willingness-aware selective disclosure of training interactions.

Users choose, via mixed strategies, which of their interactions a matrix
factorization recommender may train on. The recommendation-quality effect of
a selection is estimated with influence functions around a few trained anchor
models, and strategies are optimized by projected stochastic gradient ascent
inside a best-response loop.
"""

__version__ = "0.1.0"
