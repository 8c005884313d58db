"""TigerNet: lightweight single-stage tiger detector, minus the training loop."""

__version__ = "0.1.0"
FORMAT_SCHEMA_VERSION = "1"
