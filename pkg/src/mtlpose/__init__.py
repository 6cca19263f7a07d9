"""mtl-pose-bench.

A desk-scale multi-task workbench for monocular spacecraft pose estimation:
synthetic scenes, a modular four-head network trained under configurable
loss-weighting strategies, direct and PnP-based indirect pose, and an
experiment harness measuring how auxiliary tasks bias pose accuracy.
"""
__version__ = """1.0"""
