"""Exception types raised across the package.

Grouped here so the CLI can map any of them onto a single runtime-error
exit path while still reporting the specific failure by class name.
"""


class EmovoxError(Exception):
    """Base class for all errors raised by this package."""


# audio decoding / segmentation
class MalformedContainer(EmovoxError):
    pass


class UnsupportedEncoding(EmovoxError):
    pass


class ClipTooShort(EmovoxError):
    pass


# signal processing
class LengthNotPowerOfTwo(EmovoxError):
    pass


class NegativeFrequency(EmovoxError):
    pass


class InputTooShort(EmovoxError):
    pass


# tensor kernels
class ShapeMismatch(EmovoxError):
    pass


class EmptyValidRegion(EmovoxError):
    pass


# model
class InputBelowMinimum(EmovoxError):
    pass


class BadMagic(EmovoxError):
    pass


class UnsupportedVersion(EmovoxError):
    pass


class TruncatedPayload(EmovoxError):
    pass


class ChecksumMismatch(EmovoxError):
    pass


# dataset
class UnrecognizedFilename(EmovoxError):
    pass


class EmptyDataset(EmovoxError):
    pass


class DatasetTooSmall(EmovoxError):
    pass


class FeatureBelowMinimum(EmovoxError):
    pass


# training
class NonFiniteLoss(EmovoxError):
    pass
