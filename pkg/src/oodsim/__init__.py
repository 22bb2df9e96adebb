"""Policy-conditioned state-month forecasting, counterfactual editing, and
policy-schedule search over a learned simulator."""

__version__ = "0.1.0"
