"""Meta-learning of priors with PAC-Bayesian hyper-posteriors (PACOH).

Modules: ``numerics`` (stable linear algebra, RNG streams), ``mlp``,
``gp_prior`` and ``bnn_prior`` (prior families and marginal likelihoods),
``pacoh_meta`` (meta-training, target training, prediction), ``bounds``
(generalisation bounds), ``environments`` (synthetic task generators),
``evaluation`` (metrics), ``bo`` (pool bandits) and ``cli``.
"""

__version__ = "0.1.0"
