"""Speech emotion recognition on variable-length audio.

Feature extraction (mel spectrograms, MFCCs), a fully convolutional
classifier whose output size is independent of input length, training
with Monte Carlo cross-validation, and segment-wise streaming inference.
"""

__version__ = "0.1.0"
