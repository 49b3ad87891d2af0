"""Box-prompted medical-style image segmentation at desk scale.

Submodules load lazily so entry points can pin BLAS thread counts via
environment variables before numpy is first imported.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "annotate",
    "autodiff",
    "cli",
    "errors",
    "imgproc",
    "iohub",
    "metrics",
    "model",
    "service",
    "synthdata",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
