"""Real-time facial expression detection and emoji masking.

Library layout:

- ``imagecore``: image container, PNG/PGM/PPM codecs, grayscale, resize, crop
- ``nn``: minimal CNN forward-pass engine for VGG-style layer strings
- ``facedetect``: HoG + linear SVM sliding-window frontal face detector
- ``geometry``: keypoint model, DLT homography, warping and compositing
- ``emotion``: face preprocessing, 7-class classification, majority smoother
- ``pipeline``: end-to-end frame processing, streaming, benchmarking
- ``report``: delimited metric dumps and latency figures
"""

__version__ = "0.1.0"


class EmomaskError(Exception):
    """Base class for every error raised by this package."""


class BadMagic(EmomaskError):
    """Binary artifact does not start with the expected magic bytes."""


class VersionUnsupported(EmomaskError):
    """Binary artifact declares a format version this build cannot read."""
