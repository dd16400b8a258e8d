"""Models subpackage: mobility data models and report schemas."""
