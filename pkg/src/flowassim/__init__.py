"""Velocity-control data assimilation for 2D stationary Navier-Stokes flow."""
