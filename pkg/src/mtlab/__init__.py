"""Mean Teacher domain-generalizable detection on synthetic scenes, with landscape probes."""

__version__ = "0.1.0"
