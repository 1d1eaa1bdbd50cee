"""Numerical laboratory for the porous medium equation: solvers, obstacles, capacities."""
from .grid import CompactSet, Field, Grid, SpaceTimeUnion
from .measure import DiscreteMeasure, extract_riesz
from .solver import PMEProblem, SolverError, solve_cauchy_dirichlet, solve_measure_data

__all__ = ["CompactSet", "DiscreteMeasure", "Field", "Grid", "PMEProblem", "SolverError",
           "SpaceTimeUnion", "extract_riesz", "solve_cauchy_dirichlet", "solve_measure_data"]
