"""Reaction product prediction as a sequence of bond edits on a molecular graph."""

from bondedit.config import ModelConfig, ToyTaskSpec, load_config
from bondedit.decode import Candidate, beam_search, greedy_decode, match_gold, postprocess, realize_products
from bondedit.errors import BondEditError
from bondedit.model import ReactionModel
from bondedit.molgraph import BondType, MolGraph, ReactionRecord, ReactionTriple, apply_triple, extract_triples

__version__ = "0.1.0"

__all__ = [
    "BondEditError",
    "BondType",
    "Candidate",
    "ModelConfig",
    "MolGraph",
    "ReactionModel",
    "ReactionRecord",
    "ReactionTriple",
    "ToyTaskSpec",
    "apply_triple",
    "beam_search",
    "extract_triples",
    "greedy_decode",
    "load_config",
    "match_gold",
    "postprocess",
    "realize_products",
]
