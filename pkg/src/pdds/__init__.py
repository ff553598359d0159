"""Event-driven glucose severity classification with a spiking network and a dosing safety layer."""

__version__ = "0.1.0"
