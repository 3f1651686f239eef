"""This is the mlkit submodule for CoDA_Sim."""
