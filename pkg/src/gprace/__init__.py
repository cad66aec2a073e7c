"""Head-to-head racing simulation: a GP model of an opponent's closed-loop
behavior feeds uncertainty-aware collision constraints in an MPCC policy."""

__version__ = "0.1.0"
