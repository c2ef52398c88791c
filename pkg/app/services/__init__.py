# Solvers, estimators and experiments
