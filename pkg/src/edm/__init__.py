"""Edge Dynamic Map: CAM ingestion, geoindexed storage and MEC coordination."""

__version__ = "0.1.0"
