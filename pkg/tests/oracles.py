"""Independent exact-arithmetic transcriptions used as test oracles."""
from decimal import Decimal, getcontext
from fractions import Fraction


def centroid_exact(z, b):
    """sum(b z) / sum(b) in exact rationals."""
    zf = [Fraction(float(v)) for v in z]
    bf = [Fraction(float(v)) for v in b]
    return sum(bi * zi for bi, zi in zip(bf, zf)) / sum(bf)


def centroid_sigma_exact(z, b, sigma_z=35.0, sigma_b=0.73, digits=50):
    """sqrt(sum b^2 / (sum b)^2 sz^2 + sum (z - zbar)^2 / (sum b)^2 sb^2), 50 digits."""
    zf = [Fraction(float(v)) for v in z]
    bf = [Fraction(float(v)) for v in b]
    total = sum(bf)
    zbar = sum(bi * zi for bi, zi in zip(bf, zf)) / total
    var = (sum(bi * bi for bi in bf) / total ** 2 * Fraction(sigma_z) ** 2
           + sum((zi - zbar) ** 2 for zi in zf) / total ** 2 * Fraction(sigma_b) ** 2)
    getcontext().prec = digits
    return float((Decimal(var.numerator) / Decimal(var.denominator)).sqrt())
