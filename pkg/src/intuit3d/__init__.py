"""Point-cloud intuitive physics from posed images, at desk scale."""

__version__ = "0.1.0"
