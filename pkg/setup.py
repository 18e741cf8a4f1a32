import numpy as np
from setuptools import Extension, setup

# -ffp-contract=off and no -march=native: the compiled kernel must produce
# bit-identical trajectories to the pure-numpy fallback, so FMA contraction
# and arch-specific reassociation are disabled.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "cmvlq._kernels",
                ["src/cmvlq/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
