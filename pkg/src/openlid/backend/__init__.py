"""Out-of-set back-end: representations, LDA, pLDA and the voting ensemble."""

from .ensemble import (
    BackendConfig,
    EnsembleDecision,
    Member,
    PldaEnsemble,
    ResidentCounter,
    classify,
    classify_batch,
    enroll_language,
    fit_ensemble,
    fit_member,
    load_ensemble,
    save_ensemble,
    stratified_batches,
)
from .lda import LdaProjector, fit_lda
from .plda import PldaModel, fit_plda
from .representation import extract_representation, extract_representations

__all__ = [
    "BackendConfig", "EnsembleDecision", "LdaProjector", "Member", "PldaEnsemble", "PldaModel",
    "ResidentCounter", "classify", "classify_batch", "enroll_language", "extract_representation",
    "extract_representations", "fit_ensemble", "fit_lda", "fit_member", "fit_plda", "load_ensemble",
    "save_ensemble", "stratified_batches",
]
