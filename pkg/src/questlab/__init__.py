"""Query/key-normalized attention variants and the spurious-attention toy study."""

from questlab.attention import AttentionVariant, attend, attend_backward
from questlab.numerics import Rng

__all__ = ["AttentionVariant", "Rng", "attend", "attend_backward"]
__version__ = "0.1.0"
