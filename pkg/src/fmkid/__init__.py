"""Kernel-based identification of fading-memory systems.

The package fits nonlinear memory functionals to input-output data by
kernel regularized least squares over exponentially weighted windows of
past input, simulates the identified models open loop, and closes the
loop around a membrane-voltage integrator with identified ionic-current
elements in place of the physical ones.

Submodules are imported lazily so the command-line entry point can pin
BLAS thread counts before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "signals",
    "kernels",
    "regression",
    "plants",
    "simulate",
    "harness",
    "verify",
    "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_SUBMODULES))
