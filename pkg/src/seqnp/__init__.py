"""Sequential recommendation with neural-process inference over interest
dynamics: multi-scale convolutional interest encoding, dual (deterministic +
latent) context aggregation, and full-catalog preference decoding."""

__version__ = "0.1.0"
