"""Rule-based segmentation of pediatric brain tumors from multi-modal MRI.

Stages: Bayesian tissue classification with robust density estimates,
type-specific whole-tumor detection, and ordered decision rules for tumor
subregions. A phantom generator and Dice evaluation support verification.
"""

from .evaluation import DiceReport, dice, evaluate_case
from .phantom import PhantomCase, PhantomSpec, generate_phantom, standard_spec
from .pipeline import RunConfig, StageError, run_full, run_subregions_given_wt
from .study import InputError, Modality, Study, TumorType
from .subregion import SubregionConfig, SubregionLabel, classify_subregions, merge_necrosis
from .tissue import TissueClass, TissuePipelineConfig, run_tissue_segmentation
from .tumor import TumorRuleConfig, detect_tumor_core, expand_whole_tumor
from .volume import LabelVolume, ScalarVolume

__version__ = "0.1.0"

__all__ = [
    "DiceReport", "dice", "evaluate_case",
    "PhantomCase", "PhantomSpec", "generate_phantom", "standard_spec",
    "RunConfig", "StageError", "run_full", "run_subregions_given_wt",
    "InputError", "Modality", "Study", "TumorType",
    "SubregionConfig", "SubregionLabel", "classify_subregions", "merge_necrosis",
    "TissueClass", "TissuePipelineConfig", "run_tissue_segmentation",
    "TumorRuleConfig", "detect_tumor_core", "expand_whole_tumor",
    "LabelVolume", "ScalarVolume",
]
