"""Two-stage flow-matching generation of hand-object interaction trajectories.

Subpackages cover geometry (geom, mesh), the canonical trajectory
representation (hoirep), trainable building blocks (nn), the flow-matching
core (flow), scene tokenization (scene), two-stage orchestration (stages),
data reconstruction (reconstruct), evaluation metrics (metrics), robot-hand
retargeting (retarget), and the synthetic-data harness plus CLI (harness,
cli).
"""

__version__ = "0.1.0"
