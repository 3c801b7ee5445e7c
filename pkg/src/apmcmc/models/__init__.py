"""Target models used by the estimators and the experiment harness."""
