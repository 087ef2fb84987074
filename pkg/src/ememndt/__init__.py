"""Episodic-memory neural decision trees for vehicle behavior prediction.

A base encoder maps an observed scene to an embedding; a binary behavior tree
grown from label descriptions holds a bank of stored training embeddings at
every leaf. Predictions are soft decisions over the tree, and each one can be
traced back to the stored training instance that supported it.
"""

__version__ = "0.1.0"
