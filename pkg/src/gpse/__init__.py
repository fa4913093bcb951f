"""GPSE: exact graph positional/structural encodings and a learned encoder
that regresses them from random node features."""

from .graph import Graph, GraphCorpus, from_edge_list
from .encoder import GPSEConfig, GPSEModel, encode, init_model, train
from .pse import TargetBundle, compute_all_targets

__version__ = "0.1.0"
