"""Loss-function lab for open-set verification: margin-softmax, prototypical
and SphereFace2 losses with analytic gradients, plus a synthetic training and
evaluation harness."""

__version__ = "0.1.0"
