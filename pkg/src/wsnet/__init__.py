"""Writer-conditioned handwritten text line recognition on a synthetic multi-writer corpus."""

from .glyphs import AMBIGUOUS_PAIRS, CHARSET
from .recognizer import MODES, NetConfig, WSNet, build_network
from .wsb import AdaIN, EmbeddingTable, init_adain, init_embeddings

__version__ = "0.1.0"
