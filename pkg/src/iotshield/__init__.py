"""Flow-based DDoS detection for IoT traffic.

Pipeline: synthetic or recorded flows and device telemetry, windowed
behavioural features, a pruned and quantized random forest, an autoencoder
anomaly scorer, and a streaming detector with per-device adaptive thresholds.
"""

__version__ = "0.1.0"
