"""Spatial-temporal embedding, transformer encoder and mixture-of-experts head."""
