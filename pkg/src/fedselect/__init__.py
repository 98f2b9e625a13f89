"""Verifiable, blockchain-anchored client selection for federated learning.

The package bundles a seedable protocol simulator, the biased-selection
attacks it is meant to stop, statistical checks of pool consistency, pool
quality and anti-targeting, and on-chain cost accounting.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
