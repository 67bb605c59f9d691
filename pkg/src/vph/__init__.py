"""Particle simulator and verification suite for the planar collisionless
system with the unstable trapping potential -|x|^2/2 and self-consistent
log-kernel interaction."""

__version__ = "0.1.0"
