import math

# Slack for ceilings of products like (1 - alpha) * (N + K), which are often
# integers in exact arithmetic but land a few ulps above them in floating point.
CEIL_SLACK = 1e-9


def safe_ceil(x):
    """Ceiling that ignores floating-point excess below ``CEIL_SLACK``."""
    return int(math.ceil(x - CEIL_SLACK))
