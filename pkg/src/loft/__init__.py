"""Wavefront-shaping workbench.

Simulates coherent scattering through disordered media, generates
phase/speckle training data, runs classical focusing optimizers and an
adversarial speckle-to-phase inverse model, and scores focusing quality
against target patterns.
"""

from .core_sim import (
    CalibrationError,
    ComplexField,
    PhasePattern,
    ShapeError,
    SpecklePattern,
    TransmissionMatrix,
    calibrate_tm,
    gen_tm,
    hadamard_basis,
    intensity,
    propagate,
    quantize_phases,
)
from .classical import (
    GaConfig,
    OptimizeResult,
    TargetSpec,
    continuous_sequential,
    genetic_optimize,
    make_objective_oracle,
    objective,
    phase_conjugate,
)
from .dataset_io import (
    PairDataset,
    export_image,
    gen_dataset,
    load_dataset,
    load_tm,
    save_dataset,
    save_tm,
)
from .evalkit import FocusReport, compare, evaluate, profiles
from .loftgan import (
    LossWeights,
    TrainConfig,
    build_model,
    predict_phase,
    train,
)

__all__ = [
    "CalibrationError",
    "ComplexField",
    "FocusReport",
    "GaConfig",
    "LossWeights",
    "OptimizeResult",
    "PairDataset",
    "PhasePattern",
    "ShapeError",
    "SpecklePattern",
    "TargetSpec",
    "TrainConfig",
    "TransmissionMatrix",
    "build_model",
    "calibrate_tm",
    "compare",
    "continuous_sequential",
    "evaluate",
    "export_image",
    "gen_dataset",
    "gen_tm",
    "genetic_optimize",
    "hadamard_basis",
    "intensity",
    "load_dataset",
    "load_tm",
    "make_objective_oracle",
    "objective",
    "phase_conjugate",
    "predict_phase",
    "profiles",
    "propagate",
    "quantize_phases",
    "save_dataset",
    "save_tm",
    "train",
]
