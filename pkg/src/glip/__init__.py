"""Posterior contraction laboratory for Bayesian generalised linear inverse problems."""
