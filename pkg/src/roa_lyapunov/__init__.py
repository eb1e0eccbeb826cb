"""Learning Lyapunov functions whose certified level sets track the region of attraction."""

__version__ = "0.1.0"
