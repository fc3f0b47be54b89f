"""Central numerical tolerances shared by the linear-algebra and CIS layers."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    # matrix kernels
    orthogonality: float = 1e-12        # ||Q^T Q - I||_F <= orthogonality * n
    reconstruction: float = 1e-10       # ||Q T Q^T - A||_F <= reconstruction * ||A||_F
    sylvester_sep: float = 1e-12        # sep below this * (||A|| + ||B||) is singular
    # CIS
    riccati: float = 1e-12              # ||F(Y)||_F <= riccati * ||A(s)||_F
    riccati_max_iter: int = 30
    t21_zeroing: float = 1e-9           # ||T21(s)||_F <= t21_zeroing * ||A(s)||_F
    # equilibria
    hyperbolicity: float = 1e-8

    def with_(self, **changes) -> "Tolerances":
        return replace(self, **changes)


DEFAULT = Tolerances()
