"""Principal stratification with principal scores.

Modules: ``dataset`` (loading and validation), ``numkit`` (weighted GLM and
least-squares fitting), ``pscore`` (principal-score models and EM),
``estimators`` (weighting and covariate-adjusted effect estimators with
bootstrap inference), ``diagnostics`` (balance checks), ``sensitivity``
(eps and xi grids), ``simkit`` (simulation scenarios and exact population
oracles) and ``cli``.
"""

__version__ = "0.1.0"
