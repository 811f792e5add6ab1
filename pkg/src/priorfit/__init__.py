"""Zero-shot tabular meta-learning engine.

Pre-trains a test-masked transformer on synthetic datasets produced by random
and adversarially updated MLP generators, then predicts on unseen tabular
data in a single forward pass.
"""

__version__ = "0.1.0"
