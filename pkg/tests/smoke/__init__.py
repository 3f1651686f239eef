"""This submodule contains the smoke tests."""
