"""Mobility subpackage: grid classes, CSV ingestion, windows, synthetic cities."""
