"""matconc: matrix concentration bounds, Efron-Stein variance proxies, and
kernel Stein pair machinery, with exact-enumeration and Monte Carlo checks."""

__version__ = "0.1.0"

from . import bounds, matcore, stein, verify  # noqa: F401
