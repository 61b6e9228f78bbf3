"""Hierarchical RL search for tensor-program schedules.

The package splits the search problem into four decision levels: which
subgraph of the network to optimize next, which loop-structure sketch to
refine, which schedule modification to apply, and which concrete parameter
values to use. Measurements come from a deterministic analytic hardware
simulator or from an external measurer process.
"""

__version__ = "0.1.0"
