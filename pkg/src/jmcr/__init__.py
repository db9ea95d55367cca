"""Joint mean and correlation regression for multivariate responses."""
