"""Tools as loadable low-rank parameter modules, softly composed by a gate."""

__version__ = "0.1.0"
