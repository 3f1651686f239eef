"""All tests are contained in this submodule."""
