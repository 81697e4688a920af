"""Cross-component hardware benchmarking and device fingerprinting toolkit.

Measures CPU, GPU, memory, and storage workloads using a counter owned by a
different component as the timing reference, collects samples into per-device
CSV datasets, simulates fleets of skewed virtual devices for desk-scale
verification, and runs model-clustering, device-identification, and
performance-analysis pipelines on the result.
"""

__version__ = "0.1.0"
