"""Periodic-homogenization toolkit for thermo-diffusion with aggregation and
surface deposition in perforated media.

Modules
-------
geometry      unit cell, grain masks, boundary classification, periodic tiling
mollifier     compactly supported smoothing kernel and the mollified gradient
kinetics      Smoluchowski aggregation rates, truncation, deposition exchange
cell_solver   periodic corrector problems and effective-tensor assembly
micro_solver  full pore-scale system with Picard-decoupled implicit stepping
macro_solver  upscaled system on the homogeneous domain using the tensors
harness       config parsing, run orchestration, CSV outputs, CLI entry point
"""

__version__ = "0.1.0"
