# Numerical services: parameters, FEM, polynomials, greedy, experiments
