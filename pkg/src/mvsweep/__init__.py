"""Multi-view structure-from-motion and plane-sweep stereo reconstruction."""

__version__ = "0.1.0"
