"""SensorLens - CNN anomaly detection for wireless sensor network data"""

__version__ = "0.1.0"
