"""Theory-constrained survey imputation toolkit.

Submodules
----------
core     codebook, datasets, deterministic hashing, splits
synth    cascade-structured synthetic respondent generator
graph    (field, level) co-occurrence graph and conditionals
missing  missingness mechanisms S1-S4 and Fisher's exact test
impute   classical imputers (mean, chained PMM, forest, IPW/MI)
engine   evidence packs, prediction methods, providers
metrics  evaluation, sanity gates, benchmark and ablation runners
audits   construct coverage audit and demographic gap analysis
service  grounded question-answering assistant and HTTP app
"""

__version__ = "0.1.0"

from .core import Codebook, Dataset, Respondent, SchemaError, load_dataset, split

__all__ = ["Codebook", "Dataset", "Respondent", "SchemaError", "load_dataset",
           "split", "__version__"]
