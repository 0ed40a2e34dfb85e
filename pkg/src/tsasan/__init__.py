"""Heterogeneous-domain fault diagnosis workbench."""
