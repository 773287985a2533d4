"""Multi-player bandits whose arms receive a random number of requests per round."""

__version__ = "0.1.0"
