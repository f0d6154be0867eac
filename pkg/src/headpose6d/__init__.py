"""Head translation/rotation/geometry refinement toolkit on synthetic scenes."""

__version__ = "0.1.0"
