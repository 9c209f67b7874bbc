"""Multi-person webcam gaze tracking mapped onto a shared projection surface."""

__version__ = "0.1.0"
