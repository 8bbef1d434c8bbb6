"""N-BEATS with a composite accuracy/instability loss and dynamic loss weighting."""

__version__ = "0.1.0"
