"""Music- and text-conditioned motion generation toolkit.

Library layout mirrors the pipeline: procedural motion synthesis, contrastive
cross-modal alignment, embedding banks with thresholded retrieval, a frozen
music-conditioned diffusion generator with a zero-initialised text control
branch, and a kinematic predicate evaluation protocol.
"""

__version__ = "0.1.0"

from .motion import JointSequence, MotionClip  # noqa: F401
from .synth import PrimitiveSpec, synthesize, synthesize_corpus  # noqa: F401
from .kps import (  # noqa: F401
    KpsReport,
    PredicateResult,
    PredicateThresholds,
    beat_alignment_score,
    diversity,
    eval_predicate,
    kinematic_beats,
    run_kps,
)
