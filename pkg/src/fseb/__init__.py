"""Function-space empirical Bayes regularisation of MC-dropout networks with
Gaussian functional priors built from frozen image embeddings."""

__version__ = "0.1.0"
