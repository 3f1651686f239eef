"""This is the device submodule for CoDA_Sim."""
