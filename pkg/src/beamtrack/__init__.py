"""Vision-aided mmWave beam tracking: simulation, embedding, GRU prediction and scoring."""

__version__ = "0.1.0"
