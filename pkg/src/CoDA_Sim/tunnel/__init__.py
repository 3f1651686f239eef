"""This is the tunnel submodule for CoDA_Sim."""
