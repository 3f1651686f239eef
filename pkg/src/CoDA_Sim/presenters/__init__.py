"""This is the presenters submodule for CoDA_Sim."""
