"""driftlab: ridge and ridgeless market timing under posterior drift"""

__version__ = "1.0.0"
