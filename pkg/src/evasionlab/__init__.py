"""evasionlab: synthesize labeled TCP evasion traffic, extract packet-sequence
features, and train a from-scratch bidirectional LSTM to name the evasion."""

__version__ = "0.1.0"
