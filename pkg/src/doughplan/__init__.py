"""Planning toolkit for volumetric dough manipulation.

Staged subgoals compiled from a shape DSL, bridged by a closed-loop MPC
that steps point clouds through entropic-OT space and optimizes tool
actions with differentiable physics via point-to-point correspondences.
"""

__version__ = "0.1.0"
