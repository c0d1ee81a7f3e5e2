"""Neural-collapse geometry, replay dynamics and desk-scale continual-learning experiments."""

__version__ = "0.1.0"
