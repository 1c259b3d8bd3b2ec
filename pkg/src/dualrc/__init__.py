"""Coarse-to-fine dense correspondence with neighbourhood consensus, in numpy."""

from .backbone import DualFeatures, FeatureMap, extract_dual, patch_descriptor_dual
from .consensus import ConsensusConfig, refine
from .correlation import corr4d, transpose4d
from .evaluation import Homography, mma, mma_curve, top_k
from .matcher import MatchSet, match_dense
from .tensor import ParamStore, Tensor

__version__ = "0.1.0"
