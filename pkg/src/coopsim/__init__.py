"""coopsim: desk-scale simulator for vehicle-to-vehicle cooperative
perception and motion forecasting."""

__version__ = "0.1.0"
