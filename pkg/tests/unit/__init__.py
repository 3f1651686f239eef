"""This submodule contains the unit tests."""
