"""Nuisance-label supervision training engine.

Adversarial removal of corruption-parameter information from learned
features via a gradient reversal layer and per-factor nuisance classifier
heads, with the nuisance labels harvested for free from augmentation
parameters, plus a dependency-degree probe for diagnosing how much a
trained feature extractor still encodes each factor.
"""

__version__ = "0.1.0"
