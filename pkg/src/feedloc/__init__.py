"""Interactive temporal localization with feedback alignment on synthetic episodes."""

__version__ = "0.1.0"
