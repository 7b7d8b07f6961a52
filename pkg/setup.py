from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "driftlab._ckern",
                ["src/driftlab/_ckern.pyx"],
                # -ffp-contract=off keeps float results bit-identical to the
                # pure-Python backend (no FMA contraction)
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
else:
    # The compiled kernel is optional; driftlab falls back to the pure-Python
    # twin at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
