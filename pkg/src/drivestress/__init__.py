"""drivestress: multimodal driving-stress estimation.

Library layout:
    signals       zero-phase IIR filtering, decimation, trace containers
    cardiac       R-peak detection, heart rate, respiratory sinus arrhythmia
    eda           sparse tonic/phasic decomposition and SCR events
    respiration   breath-cycle detection and features
    features      windowed feature matrix, z-scoring, k-NN imputation
    gbt           gradient-boosted trees + exact path-dependent SHAP
    stats         AUROC, bootstrap, permutation, FDR, rank tests, LMM
    experiments   leave-one-subject-out studies and downstream analyses
    synth         ground-truth synthetic cohort generator
    io            on-disk session/dataset formats
    cli           the `stressor` command-line entry point
"""

__version__ = "0.1.0"
