"""This is the views submodule for CoDA_Sim."""
