"""Feature learning that is equivariant to the observer's own motion.

Submodules: ``engine`` (layers, backprop, Nesterov SGD), ``motion`` (ego-pose
pairs and motion patterns), ``losses``, ``training``, ``evaluation``, ``nbv``
(next-best view), ``worlds``/``datasets`` (synthetic data), ``pipeline`` and
``cli``. Nothing heavy is imported here so the CLI can cap BLAS threads first.
"""

__version__ = "0.1.0"

__all__ = [
    "datasets",
    "engine",
    "evaluation",
    "gradcheck",
    "kernels",
    "losses",
    "motion",
    "nbv",
    "pipeline",
    "training",
    "worlds",
]
