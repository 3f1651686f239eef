"""This is the core submodule for CoDA_Sim."""
