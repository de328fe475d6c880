"""Two-stage adaptive robust optimization with a learned adversarial search.

Subpackages:

- ``autodiff``: tape-based reverse-mode differentiation kernel
- ``sets``: uncertainty-set geometries, projections, budget penalties
- ``qp``: operator-splitting QP solver
- ``recourse``: HVAC benchmark instance, recourse evaluation, scenario master
- ``valuenet``: set-encoder surrogate of the recourse value function
- ``l2o``: learned proximal-gradient adversarial optimizer
- ``ccg``: column-and-constraint generation outer loop
- ``bench``: in-distribution / out-of-distribution benchmark suites
- ``cli``: command-line entry point
"""

__version__ = "0.1.0"
