"""This is the cloud submodule for CoDA_Sim."""
