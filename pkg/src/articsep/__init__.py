"""Knowledge-driven target-speech extraction for cinematic audio."""

__version__ = "0.1.0"
