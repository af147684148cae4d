"""Shared test configuration.

Hypothesis runs derandomized so the whole suite is exactly reproducible;
every statistical check elsewhere draws from a fixed-seed Philox stream for
the same reason.
"""

from hypothesis import HealthCheck, settings

settings.register_profile(
    "lab",
    derandomize=True,
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("lab")
