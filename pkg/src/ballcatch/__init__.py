"""Drag-aware ball estimation, bi-level catch planning and learned tracking
for an 8-DoF mobile manipulator, with a closed-loop Monte-Carlo simulator."""

__version__ = "0.1.0"
